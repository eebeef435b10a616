use thiserror::Error;

use crate::ipsolver::SolveStatus;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("phi_map domain violation: |d|^2 = {0} >= 1")]
    Domain(f64),
    #[error("relative rotation too large for one step (scalar part {0})")]
    ExcessiveRotation(f64),
    #[error("mechanism: {0}")]
    Mechanism(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("solver {status:?} after {iterations} iterations (r_vio {r_vio:.3e}, kappa_vio {kappa_vio:.3e})")]
    Solver {
        status: SolveStatus,
        iterations: usize,
        r_vio: f64,
        kappa_vio: f64,
    },
    #[error("at step {step}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
