//! Box geometry and friction identification from configuration triplets.
//!
//! The learnable parameters are the friction coefficient shared by all
//! contacts and the body-frame positions of the eight vertices. Predictions
//! come from one simulation step; Gauss-Newton uses the implicit step
//! gradients of the relaxed contact model.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dojo_core::dynamics::BodyInput;
use dojo_core::ipsolver::SolverOptions;
use dojo_core::mech::{BodyConfig, Mechanism};
use dojo_core::quat::{phi_map, quat_mul, UnitQuaternion};
use dojo_core::sim::{init_from_velocity, simulate, step, SimOptions, SimState, StepResult};
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const N_VERTICES: usize = 8;
pub const N_PARAMS: usize = 1 + 3 * N_VERTICES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SysidParams {
    pub c_f: f64,
    pub vertices: [Vector3<f64>; N_VERTICES],
}

impl SysidParams {
    /// Parameters of a mechanism whose single body touches the floor through
    /// eight vertex contacts.
    pub fn of(mech: &Mechanism) -> Result<Self> {
        if mech.num_bodies() != 1 || mech.contacts.len() != N_VERTICES {
            bail!("expected one body with {N_VERTICES} vertex contacts");
        }
        let c_f = mech.contacts[0].friction;
        if mech.contacts.iter().any(|c| c.friction != c_f) {
            bail!("vertex contacts must share one friction coefficient");
        }
        Ok(Self {
            c_f,
            vertices: std::array::from_fn(|k| mech.contacts[k].offset),
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(N_PARAMS);
        v[0] = self.c_f;
        for (k, p) in self.vertices.iter().enumerate() {
            v.rows_mut(1 + 3 * k, 3).copy_from(p);
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            c_f: v[0],
            vertices: std::array::from_fn(|k| Vector3::new(v[1 + 3 * k], v[2 + 3 * k], v[3 + 3 * k])),
        }
    }

    /// `template` with these vertices and friction coefficient.
    pub fn apply(&self, template: &Mechanism) -> Result<Mechanism> {
        if !(self.c_f > 0.0) {
            bail!("friction coefficient must be positive, got {}", self.c_f);
        }
        let mut desc = template.to_desc();
        for (c, v) in desc.contacts.iter_mut().zip(&self.vertices) {
            c.offset = *v;
            c.friction = self.c_f;
        }
        Ok(Mechanism::from_desc(desc)?)
    }

    /// Relative errors `(c_f, per-vertex ‖v̂ − v‖/‖v‖)` against `truth`.
    pub fn relative_errors(&self, truth: &Self) -> (f64, [f64; N_VERTICES]) {
        let cf = (self.c_f - truth.c_f).abs() / truth.c_f;
        let verts = std::array::from_fn(|k| (self.vertices[k] - truth.vertices[k]).norm() / truth.vertices[k].norm());
        (cf, verts)
    }

    /// Every entry scaled by `1 ± fraction` with a random sign.
    pub fn perturbed<R: Rng>(&self, rng: &mut R, fraction: f64) -> Self {
        let v = self.to_vector().map(|x| if rng.random_bool(0.5) { x * (1.0 + fraction) } else { x * (1.0 - fraction) });
        Self::from_vector(&v)
    }
}

/// Three consecutive configurations of the single body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triplet {
    pub traj: usize,
    pub step: usize,
    pub z_prev: BodyConfig,
    pub z: BodyConfig,
    pub z_next: BodyConfig,
}

fn config_fields(x: &BodyConfig) -> [f64; 7] {
    let q = x.q.to_vec4();
    [x.p.x, x.p.y, x.p.z, q[0], q[1], q[2], q[3]]
}

fn config_from(f: &[f64]) -> Result<BodyConfig> {
    let q = UnitQuaternion::from_vec4(&Vector4::new(f[3], f[4], f[5], f[6]))?;
    Ok(BodyConfig::new(Vector3::new(f[0], f[1], f[2]), q))
}

/// Writes one triplet per row: `traj_id, step`, then `z₋, z, z₊` as `(p, q)`.
pub fn write_dataset<W: Write>(out: W, data: &[Triplet]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["traj_id".to_string(), "step".to_string()];
    for tag in ["prev", "cur", "next"] {
        for c in ["px", "py", "pz", "qs", "qx", "qy", "qz"] {
            header.push(format!("{c}_{tag}"));
        }
    }
    w.write_record(&header)?;
    for t in data {
        let mut row = vec![t.traj.to_string(), t.step.to_string()];
        for x in [&t.z_prev, &t.z, &t.z_next] {
            // shortest representation that parses back to the same value
            row.extend(config_fields(x).iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Triplet>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 23 {
            bail!("{}: row {} has {} fields, expected 23", path.display(), line + 1, rec.len());
        }
        let traj = rec[0].parse()?;
        let step = rec[1].parse()?;
        let v = rec.iter().skip(2).map(str::parse).collect::<std::result::Result<Vec<f64>, _>>()?;
        out.push(Triplet {
            traj,
            step,
            z_prev: config_from(&v[0..7])?,
            z: config_from(&v[7..14])?,
            z_next: config_from(&v[14..21])?,
        });
    }
    Ok(out)
}

/// Simulation settings shared by data generation and prediction, so that
/// noiseless data is reproduced exactly at the true parameters.
pub fn step_options(solver: &SolverOptions, gradients: Option<f64>) -> SimOptions {
    SimOptions {
        solver: solver.clone(),
        warm_start: false,
        gradients: gradients.is_some(),
        kappa_grad: gradients.unwrap_or(3e-4),
    }
}

/// Randomized box toss: random orientation, height, velocity and spin.
fn toss<R: Rng>(rng: &mut R, mech: &Mechanism) -> Result<SimState> {
    let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let q = UnitQuaternion::from_axis_angle(&axis, rng.random_range(0.0..std::f64::consts::PI));
    let low = mech.contacts.iter().map(|c| q.rotate(&c.offset).z).fold(f64::INFINITY, f64::min);
    let p = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(0.02..0.4) - low);
    let v = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
    let w = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
    Ok(init_from_velocity(mech, &[BodyConfig::new(p, q)], &[v], &[w])?)
}

fn add_noise<R: Rng>(rng: &mut R, x: &BodyConfig, noise: &Normal<f64>) -> Result<BodyConfig> {
    let dp = Vector3::from_fn(|_, _| noise.sample(rng));
    let dq = Vector3::from_fn(|_, _| noise.sample(rng) / 2.0);
    Ok(BodyConfig::new(x.p + dp, quat_mul(&x.q, &phi_map(&dq)?)?))
}

/// Simulates `n_traj` tosses of `T` configurations each and splits them into
/// `T − 2` triplets per toss. Trajectory `j` draws from stream `j` of the
/// seeded generator, so the result does not depend on scheduling.
pub fn make_synthetic_dataset(
    truth: &Mechanism,
    n_traj: usize,
    configs_per_traj: usize,
    seed: u64,
    noise_std: f64,
    solver: &SolverOptions,
) -> Result<Vec<Triplet>> {
    if n_traj == 0 || configs_per_traj < 3 {
        bail!("need at least one trajectory of three configurations");
    }
    let noise = Normal::new(0.0, noise_std.max(0.0))?;
    let opts = step_options(solver, None);
    let per_traj = (0..n_traj)
        .into_par_iter()
        .map(|j| -> Result<Vec<Triplet>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let st = toss(&mut rng, truth)?;
            let traj = simulate(truth, &st, |_, _| vec![BodyInput::default()], configs_per_traj - 2, &opts)?;
            let mut configs = vec![st.z_prev[0], st.z[0]];
            configs.extend(traj.configs.iter().map(|c| c[0]));
            if noise_std > 0.0 {
                configs = configs.iter().map(|x| add_noise(&mut rng, x, &noise)).collect::<Result<_>>()?;
            }
            Ok(configs
                .windows(3)
                .enumerate()
                .map(|(k, w)| Triplet {
                    traj: j,
                    step: k,
                    z_prev: w[0],
                    z: w[1],
                    z_next: w[2],
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_traj.into_iter().flatten().collect())
}

/// Weighted prediction error of one triplet.
struct TripletError {
    e: nalgebra::SVector<f64, 6>,
    /// `∂e/∂θ`, present when gradients were requested.
    jac: Option<DMatrix<f64>>,
}

fn is_solver_failure(e: &dojo_core::Error) -> bool {
    matches!(
        e,
        dojo_core::Error::Solver { .. } | dojo_core::Error::ExcessiveRotation(_) | dojo_core::Error::AtStep { .. }
    )
}

/// `(p̂ − p₊, V(q₊* ⊗ q̂))` and optionally its parameter Jacobian.
fn triplet_error(mech: &Mechanism, t: &Triplet, opts: &SimOptions) -> Result<Option<TripletError>> {
    let st = SimState {
        z_prev: vec![t.z_prev],
        z: vec![t.z],
    };
    let res: StepResult = match step(mech, &st, &[BodyInput::default()], opts, None) {
        Ok((_, r)) => r,
        Err(e) if is_solver_failure(&e) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let pred = res.z_next[0];
    let r = quat_mul(&t.z_next.q.conj(), &pred.q)?;
    let mut e = nalgebra::SVector::<f64, 6>::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(pred.p - t.z_next.p));
    e.fixed_rows_mut::<3>(3).copy_from(&r.v);
    let jac = res.jacobians.map(|j| {
        let n_contacts = mech.contacts.len();
        let dz = DMatrix::from_fn(6, N_PARAMS, |row, col| {
            if col == 0 {
                (0..n_contacts).map(|c| j.d_params[(row, c)]).sum()
            } else {
                j.d_params[(row, n_contacts + col - 1)]
            }
        });
        // V(r ⊗ φ(δ)) = r_v + (r_s I + [r_v]×) δ + O(δ²)
        let g = Matrix3::identity() * r.s + r.v.cross_matrix();
        let mut out = dz.clone();
        out.rows_mut(3, 3).copy_from(&(g * dz.rows(3, 3)));
        out
    });
    Ok(Some(TripletError { e, jac }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Triplets whose step failed to solve and were left out.
    pub skipped: usize,
}

fn weighted_loss(e: &nalgebra::SVector<f64, 6>, w: &[f64; 6]) -> f64 {
    0.5 * e.iter().zip(w).map(|(x, wi)| wi * x * x).sum::<f64>()
}

/// `Σ ½‖step(z₋, z; θ) − z₊‖²_W` with orientation errors in tangent space.
pub fn sysid_loss(
    data: &[Triplet],
    template: &Mechanism,
    params: &SysidParams,
    weights: &[f64; 6],
    solver: &SolverOptions,
) -> Result<LossReport> {
    let mech = params.apply(template)?;
    let opts = step_options(solver, None);
    let errs = data
        .par_iter()
        .map(|t| triplet_error(&mech, t, &opts))
        .collect::<Result<Vec<_>>>()?;
    let mut report = LossReport { loss: 0.0, skipped: 0 };
    for e in &errs {
        match e {
            Some(e) => report.loss += weighted_loss(&e.e, weights),
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

/// Loss, gradient `Σ JᵀWe` and Gauss-Newton Hessian `Σ JᵀWJ` at `params`.
struct Linearization {
    loss: f64,
    skipped: usize,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

fn linearize(
    data: &[Triplet],
    template: &Mechanism,
    params: &SysidParams,
    weights: &[f64; 6],
    solver: &SolverOptions,
    kappa_grad: f64,
) -> Result<Linearization> {
    let mech = params.apply(template)?;
    let opts = step_options(solver, Some(kappa_grad));
    let errs = data
        .par_iter()
        .map(|t| triplet_error(&mech, t, &opts))
        .collect::<Result<Vec<_>>>()?;
    let w = DMatrix::from_diagonal(&DVector::from_row_slice(weights));
    let mut lin = Linearization {
        loss: 0.0,
        skipped: 0,
        gradient: DVector::zeros(N_PARAMS),
        hessian: DMatrix::zeros(N_PARAMS, N_PARAMS),
    };
    for e in &errs {
        let Some(e) = e else {
            lin.skipped += 1;
            continue;
        };
        let j = e.jac.as_ref().expect("gradients requested");
        let wj = &w * j;
        lin.loss += weighted_loss(&e.e, weights);
        lin.gradient += wj.transpose() * DVector::from_column_slice(e.e.as_slice());
        lin.hessian += j.transpose() * wj;
    }
    Ok(lin)
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loss: f64,
    pub lambda: f64,
    pub step_norm: f64,
    pub gradient_norm: f64,
    /// Gauss-Newton curvature along the friction coefficient.
    pub friction_curvature: f64,
    pub min_eigenvalue: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct FitResult {
    pub params: SysidParams,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub weights: [f64; 6],
    pub max_gn_iters: usize,
    pub kappa_grad: f64,
    pub solver: SolverOptions,
    pub lambda0: f64,
    pub lambda_max: f64,
    pub rel_decrease: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            weights: [1.0; 6],
            max_gn_iters: 30,
            kappa_grad: 3e-4,
            solver: SolverOptions::default(),
            lambda0: 1e-6,
            lambda_max: 1e12,
            rel_decrease: 1e-8,
        }
    }
}

fn min_eigenvalue(h: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(h.clone()).eigenvalues.min()
}

/// Levenberg-damped Gauss-Newton on the triplet loss.
///
/// Each iteration solves `(H + λI) Δ = −g`; a step is accepted when it lowers
/// the loss (then `λ ← λ/10`), otherwise `λ ← 10λ` and the step is retried.
/// Stops when an accepted step lowers the loss by less than
/// `rel_decrease` relative, when the gradient vanishes, or at the cap.
pub fn sysid_fit(data: &[Triplet], template: &Mechanism, theta0: &SysidParams, opts: &FitOptions) -> Result<FitResult> {
    if !theta0.to_vector().iter().all(|x| x.is_finite()) {
        bail!("initial parameters must be finite");
    }
    let mut theta = theta0.clone();
    let mut lambda = opts.lambda0;
    let mut lin = linearize(data, template, &theta, &opts.weights, &opts.solver, opts.kappa_grad)?;
    let entry = |it: usize, lin: &Linearization, lambda: f64, step: f64| TraceEntry {
        iteration: it,
        loss: lin.loss,
        lambda,
        step_norm: step,
        gradient_norm: lin.gradient.norm(),
        friction_curvature: lin.hessian[(0, 0)],
        min_eigenvalue: min_eigenvalue(&lin.hessian),
        skipped: lin.skipped,
    };
    let mut trace = vec![entry(0, &lin, lambda, 0.0)];
    let mut converged = false;
    for it in 1..=opts.max_gn_iters {
        if lin.loss == 0.0 || lin.gradient.amax() == 0.0 {
            trace.push(entry(it, &lin, lambda, 0.0));
            converged = true;
            break;
        }
        let x = theta.to_vector();
        let mut factorized = false;
        let accepted = loop {
            if lambda > opts.lambda_max {
                break None;
            }
            let damped = &lin.hessian + DMatrix::identity(N_PARAMS, N_PARAMS) * lambda;
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            factorized = true;
            let delta = chol.solve(&-&lin.gradient);
            let candidate = SysidParams::from_vector(&(&x + &delta));
            if candidate.c_f > 0.0 {
                // linearizing the trial directly saves a solve pass per accepted step
                let trial = linearize(data, template, &candidate, &opts.weights, &opts.solver, opts.kappa_grad)?;
                if trial.loss < lin.loss {
                    break Some((candidate, trial, delta.norm()));
                }
            }
            lambda *= 10.0;
        };
        let Some((candidate, trial, step_norm)) = accepted else {
            if !factorized {
                bail!("damped Gauss-Newton Hessian singular at maximal damping; trace: {trace:?}");
            }
            // no damping level lowers the loss: stationary to solver precision
            converged = true;
            break;
        };
        let previous = lin.loss;
        theta = candidate;
        lambda = (lambda / 10.0).max(f64::MIN_POSITIVE);
        lin = trial;
        trace.push(entry(it, &lin, lambda, step_norm));
        log::info!("sysid iteration {it}: loss {:.6e}, λ {lambda:.1e}", lin.loss);
        log::debug!("θ = {:?}", theta.to_vector().as_slice());
        if (previous - lin.loss) / previous < opts.rel_decrease {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        params: theta,
        trace,
        converged,
    })
}
