//! Time stepping, initial conditions and trajectory diagnostics.

use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::contact::{assemble_ncp, ContactState};
use crate::diff::{implicit_step_gradients, StepJacobians};
use crate::dynamics::{angular_momentum, energy, linear_momentum, BodyInput};
use crate::ipsolver::{self, SolveStatus, SolverOptions, SolverPoint};
use crate::mech::{BodyConfig, Mechanism};
use crate::quat::phi_map;
use crate::{Error, Result};

/// Two consecutive configurations `(z₋, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub z_prev: Vec<BodyConfig>,
    pub z: Vec<BodyConfig>,
}

impl SimState {
    pub fn at_rest(z: Vec<BodyConfig>) -> Self {
        Self { z_prev: z.clone(), z }
    }

    fn check(&self, mech: &Mechanism) -> Result<()> {
        let n = mech.num_bodies();
        if self.z.len() != n || self.z_prev.len() != n {
            return Err(Error::Dimension(format!(
                "state has {} / {} configurations for {n} bodies",
                self.z_prev.len(),
                self.z.len()
            )));
        }
        for x in self.z.iter().chain(&self.z_prev) {
            if (x.q.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("non-unit quaternion (norm {})", x.q.norm())));
            }
        }
        Ok(())
    }
}

/// Backs out `z₋` so the finite differences over `[z₋, z]` reproduce the
/// given linear velocities and world-frame angular velocities.
pub fn init_from_velocity(
    mech: &Mechanism,
    configs: &[BodyConfig],
    linear: &[Vector3<f64>],
    angular: &[Vector3<f64>],
) -> Result<SimState> {
    let n = mech.num_bodies();
    if configs.len() != n || linear.len() != n || angular.len() != n {
        return Err(Error::Dimension("one configuration and velocity pair per body".into()));
    }
    let h = mech.timestep;
    let z_prev = configs
        .iter()
        .zip(linear.iter().zip(angular))
        .map(|(x, (v, w))| {
            let psi = x.q.rotation_matrix().transpose() * w * (h / 2.0);
            Ok(BodyConfig {
                p: x.p - v * h,
                q: crate::quat::mul_unit(&x.q, &phi_map(&psi)?.conj()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimState {
        z_prev,
        z: configs.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub solver: SolverOptions,
    /// Start each solve from the previous step's impulses and cone variables.
    pub warm_start: bool,
    pub gradients: bool,
    pub kappa_grad: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            warm_start: true,
            gradients: false,
            kappa_grad: 3e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub z_next: Vec<BodyConfig>,
    /// Solver variable at convergence, reusable as a warm start.
    pub point: SolverPoint,
    pub status: SolveStatus,
    pub iterations: usize,
    pub r_vio: f64,
    pub kappa_vio: f64,
    pub contacts: Vec<ContactState>,
    pub jacobians: Option<StepJacobians>,
}

/// Advances `(z₋, z)` by one step.
pub fn step(
    mech: &Mechanism,
    state: &SimState,
    u: &[BodyInput],
    opts: &SimOptions,
    warm: Option<&SolverPoint>,
) -> Result<(SimState, StepResult)> {
    state.check(mech)?;
    let problem = assemble_ncp(mech, &state.z_prev, &state.z, u)?;
    let w0 = problem.initial_point(if opts.warm_start { warm } else { None });
    let mut so = opts.solver.clone();
    if opts.gradients {
        so.kappa_grad = Some(opts.kappa_grad);
    }
    let res = ipsolver::solve(&problem, &w0, &so)?;
    if !res.converged() {
        return Err(res.to_error());
    }
    let jacobians = if opts.gradients {
        Some(implicit_step_gradients(&problem, &res, opts.kappa_grad)?)
    } else {
        None
    };
    let z_next = problem.next_configs(&res.w);
    let contacts = (0..mech.contacts.len()).map(|k| problem.contact_state(&res.w, k)).collect();
    let next = SimState {
        z_prev: state.z.clone(),
        z: z_next.clone(),
    };
    Ok((
        next,
        StepResult {
            z_next,
            point: res.w,
            status: res.status,
            iterations: res.iterations,
            r_vio: res.r_vio,
            kappa_vio: res.kappa_vio,
            contacts,
            jacobians,
        },
    ))
}

/// Per-step diagnostics over the interval `[z_k, z_{k+1}]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Diagnostics {
    pub energy: f64,
    pub linear_momentum: Vector3<f64>,
    pub angular_momentum: Vector3<f64>,
    /// Smallest signed distance at `z_{k+1}`; infinite without contacts.
    pub min_phi: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub timestep: f64,
    pub initial: SimState,
    /// `z_1 … z_T`.
    pub configs: Vec<Vec<BodyConfig>>,
    pub controls: Vec<Vec<BodyInput>>,
    pub contacts: Vec<Vec<ContactState>>,
    pub diagnostics: Vec<Diagnostics>,
    pub jacobians: Vec<StepJacobians>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// `z_k` for `k = 0 … T`.
    pub fn config(&self, k: usize) -> &[BodyConfig] {
        if k == 0 {
            &self.initial.z
        } else {
            &self.configs[k - 1]
        }
    }

    /// `(z_{k-1}, z_k)` for `k = 0 … T`.
    pub fn state(&self, k: usize) -> SimState {
        let prev = if k == 0 { &self.initial.z_prev } else { self.config(k - 1) };
        SimState {
            z_prev: prev.to_vec(),
            z: self.config(k).to_vec(),
        }
    }

    pub fn min_phi(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.min_phi).fold(f64::INFINITY, f64::min)
    }

    /// One row per step with the configuration after the step, contact
    /// variables and diagnostics, printed with 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let nb = self.initial.z.len();
        let nc = self.contacts.first().map_or(0, Vec::len);
        let mut header = vec!["step".to_string(), "time".to_string()];
        for i in 0..nb {
            for c in ["px", "py", "pz", "qs", "qx", "qy", "qz"] {
                header.push(format!("{c}{i}"));
            }
        }
        for k in 0..nc {
            for c in ["gamma", "b1_", "b2_", "phi"] {
                header.push(format!("{c}{k}"));
            }
        }
        for c in ["energy", "lx", "ly", "lz", "ax", "ay", "az", "min_phi", "iterations"] {
            header.push(c.to_string());
        }
        writeln!(out, "{}", header.join(","))?;
        let f = |x: f64| format!("{x:.16e}");
        for k in 0..self.len() {
            let mut row = vec![(k + 1).to_string(), f((k + 1) as f64 * self.timestep)];
            for x in &self.configs[k] {
                row.extend(x.p.iter().map(|&v| f(v)));
                row.extend(x.q.to_vec4().iter().map(|&v| f(v)));
            }
            for c in &self.contacts[k] {
                row.extend([c.gamma, c.friction[0], c.friction[1], c.phi].map(f));
            }
            let d = &self.diagnostics[k];
            row.push(f(d.energy));
            row.extend(d.linear_momentum.iter().chain(d.angular_momentum.iter()).map(|&v| f(v)));
            row.push(f(d.min_phi));
            row.push(d.iterations.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Runs `steps` steps, querying `controller(k, state)` for the inputs.
pub fn simulate<C>(
    mech: &Mechanism,
    initial: &SimState,
    mut controller: C,
    steps: usize,
    opts: &SimOptions,
) -> Result<Trajectory>
where
    C: FnMut(usize, &SimState) -> Vec<BodyInput>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("at least one step is required".into()));
    }
    initial.check(mech)?;
    let h = mech.timestep;
    let mut traj = Trajectory {
        timestep: h,
        initial: initial.clone(),
        configs: Vec::with_capacity(steps),
        controls: Vec::with_capacity(steps),
        contacts: Vec::with_capacity(steps),
        diagnostics: Vec::with_capacity(steps),
        jacobians: Vec::new(),
    };
    let mut state = initial.clone();
    let mut warm: Option<SolverPoint> = None;
    for k in 0..steps {
        let u = controller(k, &state);
        let (next, res) = step(mech, &state, &u, opts, warm.as_ref()).map_err(|e| Error::AtStep {
            step: k,
            source: Box::new(e),
        })?;
        traj.diagnostics.push(Diagnostics {
            energy: energy(mech, &state.z, &next.z, h),
            linear_momentum: linear_momentum(mech, &state.z, &next.z, h),
            angular_momentum: angular_momentum(mech, &state.z, &next.z, h),
            min_phi: res.contacts.iter().map(|c| c.phi).fold(f64::INFINITY, f64::min),
            iterations: res.iterations,
        });
        traj.configs.push(res.z_next);
        traj.controls.push(u);
        traj.contacts.push(res.contacts);
        if let Some(j) = res.jacobians {
            traj.jacobians.push(j);
        }
        warm = Some(res.point);
        state = next;
    }
    Ok(traj)
}
