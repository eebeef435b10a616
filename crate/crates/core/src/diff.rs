//! Implicit gradients of one simulation step.
//!
//! The step map `(z₋, z, u, params) ↦ z₊` is differentiated at a point of the
//! relaxed system `r(w; θ, κ_grad) = 0`, which keeps the map smooth across
//! contact mode changes. Rows are ordered `(p₊, δ₊)` per body, where `δ₊` is
//! the tangent perturbation `q₊ ⊗ φ(δ₊)`.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::contact::{StepProblem, ThetaLayout};
use crate::ipsolver::{self, CentralOptions, SolveResult, SolverOptions, SolverPoint};
use crate::mech::{BodyConfig, Mechanism};
use crate::quat::{local_coords, mul_unit, phi_map};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct StepJacobians {
    /// `∂z₊/∂z₋`, `6N × 6N`.
    pub d_zprev: DMatrix<f64>,
    /// `∂z₊/∂z`, `6N × 6N`.
    pub d_z: DMatrix<f64>,
    /// `∂z₊/∂u`, `6N × 6N` with inputs `(f, τ)` per body.
    pub d_u: DMatrix<f64>,
    /// `∂z₊/∂(c_f, offsets, m, J, h)`.
    pub d_params: DMatrix<f64>,
    pub kappa_grad: f64,
    /// Set when the relaxed point could not be polished and the raw cached
    /// iterate was used instead.
    pub fallback: bool,
}

impl StepJacobians {
    fn from_full(tl: &ThetaLayout, full: &DMatrix<f64>, kappa_grad: f64, fallback: bool) -> Self {
        let n6 = 6 * tl.n_bodies;
        Self {
            d_zprev: full.columns(tl.t_z_prev(0), n6).into_owned(),
            d_z: full.columns(tl.t_z(0), n6).into_owned(),
            d_u: full.columns(tl.t_u(0), n6).into_owned(),
            d_params: full.columns(tl.t_params(), tl.n_params()).into_owned(),
            kappa_grad,
            fallback,
        }
    }

    /// All columns in θ tangent order.
    pub fn full(&self) -> DMatrix<f64> {
        let n = self.d_zprev.nrows();
        let cols = [&self.d_zprev, &self.d_z, &self.d_u, &self.d_params];
        let total = cols.iter().map(|m| m.ncols()).sum();
        let mut out = DMatrix::zeros(n, total);
        let mut c0 = 0;
        for m in cols {
            out.columns_mut(c0, m.ncols()).copy_from(m);
            c0 += m.ncols();
        }
        out
    }

    /// Column of the friction coefficient of contact `k`.
    pub fn d_friction(&self, k: usize) -> DMatrix<f64> {
        self.d_params.columns(k, 1).into_owned()
    }
}

/// Rows of the `z₊` entries in the tangent solver vector.
fn z_next_rows(problem: &StepProblem) -> Vec<usize> {
    let layout = ipsolver::NcpProblem::layout(problem);
    (0..layout.n_quat)
        .flat_map(|i| {
            let q0 = layout.quat_tangent_offset(i);
            (3 * i..3 * i + 3).chain(q0..q0 + 3)
        })
        .collect()
}

/// Gradients of `z₊` at the relaxed solution with `κ = kappa_grad`.
///
/// Starts from the iterate cached by the solver (or the final iterate when no
/// cache exists), polishes it onto the central path and solves the implicit
/// function system there.
pub fn implicit_step_gradients(
    problem: &StepProblem,
    result: &SolveResult,
    kappa_grad: f64,
) -> Result<StepJacobians> {
    let start = result.kappa_cache.as_ref().unwrap_or(&result.w);
    let (w, fallback) = match ipsolver::solve_central(problem, start, kappa_grad, &CentralOptions::default()) {
        Ok(cp) => (cp.w, false),
        Err(e) => {
            log::warn!("central-path polish failed ({e}); differentiating the cached iterate");
            (start.clone(), true)
        }
    };
    gradients_at(problem, &w, kappa_grad, fallback)
}

/// Gradients at a given point of the relaxed system.
pub fn gradients_at(problem: &StepProblem, w: &SolverPoint, kappa_grad: f64, fallback: bool) -> Result<StepJacobians> {
    let sens = ipsolver::sensitivity(problem, w)?;
    let rows = z_next_rows(problem);
    let full = DMatrix::from_fn(rows.len(), sens.ncols(), |i, j| sens[(rows[i], j)]);
    Ok(StepJacobians::from_full(&problem.theta_layout(), &full, kappa_grad, fallback))
}

/// Relaxed step solution: interior-point solve followed by a central-path
/// polish at `kappa`.
pub fn relaxed_step(problem: &StepProblem, opts: &SolverOptions, kappa: f64) -> Result<SolverPoint> {
    let mut o = opts.clone();
    o.kappa_grad = Some(kappa);
    let res = ipsolver::solve(problem, &problem.initial_point(None), &o)?;
    let start = res.kappa_cache.as_ref().unwrap_or(&res.w);
    Ok(ipsolver::solve_central(problem, start, kappa, &CentralOptions::default())?.w)
}

/// `θ` moved by `eps·dir`, with `dir` in θ tangent coordinates.
/// Orientations move by `q ⊗ φ(eps·d)`, everything else additively.
pub fn retract_theta(tl: &ThetaLayout, theta: &[f64], dir: &DVector<f64>, eps: f64) -> Result<Vec<f64>> {
    if dir.len() != tl.tangent_len() {
        return Err(Error::Dimension(format!("direction has {} entries, expected {}", dir.len(), tl.tangent_len())));
    }
    let mut th = theta.to_vec();
    let n = tl.n_bodies;
    for i in 0..n {
        for (raw, t) in [(tl.z_prev(i), tl.t_z_prev(i)), (tl.z(i), tl.t_z(i))] {
            for a in 0..3 {
                th[raw + a] += eps * dir[t + a];
            }
            let d = Vector3::new(dir[t + 3], dir[t + 4], dir[t + 5]) * eps;
            let q = mul_unit(&tl.config(theta, raw).q, &phi_map(&d)?);
            th[raw + 3..raw + 7].copy_from_slice(q.to_vec4().as_slice());
        }
    }
    // remaining tangent columns map one to one after the 14N configuration entries
    for t in 12 * n..tl.tangent_len() {
        th[t + 2 * n] += eps * dir[t];
    }
    Ok(th)
}

/// `θ` moved by `eps` along tangent column `col`.
pub fn perturb_theta(tl: &ThetaLayout, theta: &[f64], col: usize, eps: f64) -> Result<Vec<f64>> {
    let mut dir = DVector::zeros(tl.tangent_len());
    dir[col] = 1.0;
    retract_theta(tl, theta, &dir, eps)
}

/// Tangent difference `(z_a ⊖ z_b)` relative to `z0`, stacked `(p, δ)` per body.
fn config_difference(z0: &[BodyConfig], za: &[BodyConfig], zb: &[BodyConfig]) -> DVector<f64> {
    let mut out = DVector::zeros(6 * z0.len());
    for i in 0..z0.len() {
        out.rows_mut(6 * i, 3).copy_from(&(za[i].p - zb[i].p));
        out.rows_mut(6 * i + 3, 3)
            .copy_from(&(local_coords(&z0[i].q, &za[i].q) - local_coords(&z0[i].q, &zb[i].q)));
    }
    out
}

/// Central difference of the relaxed step map along a θ tangent direction,
/// with the solver's κ continuation stopped at `kappa`.
pub fn fd_step_oracle(
    mech: &Mechanism,
    theta: &[f64],
    dir: &DVector<f64>,
    eps: f64,
    kappa: f64,
    opts: &SolverOptions,
) -> Result<DVector<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let tl = ThetaLayout::new(mech);
    let eval = |th: Vec<f64>| -> Result<Vec<BodyConfig>> {
        let p = StepProblem::from_theta(mech, th)?;
        let w = relaxed_step(&p, opts, kappa)?;
        Ok(p.next_configs(&w))
    };
    let z0 = eval(theta.to_vec())?;
    let zp = eval(retract_theta(&tl, theta, dir, eps)?)?;
    let zm = eval(retract_theta(&tl, theta, dir, -eps)?)?;
    Ok(config_difference(&z0, &zp, &zm) / (2.0 * eps))
}

/// Full finite-difference Jacobian, one column per θ tangent direction.
pub fn fd_step_jacobians(
    mech: &Mechanism,
    theta: &[f64],
    eps: f64,
    kappa: f64,
    opts: &SolverOptions,
) -> Result<StepJacobians> {
    let tl = ThetaLayout::new(mech);
    let mut full = DMatrix::zeros(6 * tl.n_bodies, tl.tangent_len());
    for col in 0..tl.tangent_len() {
        let mut dir = DVector::zeros(tl.tangent_len());
        dir[col] = 1.0;
        full.set_column(col, &fd_step_oracle(mech, theta, &dir, eps, kappa, opts)?);
    }
    Ok(StepJacobians::from_full(&tl, &full, kappa, false))
}
