//! Differentiable rigid-body simulation with hard contact.
//!
//! Bodies live in maximal coordinates. Each time step is a nonlinear
//! complementarity problem built from a variational integrator, joint
//! constraints and contact/friction conditions, solved by a primal-dual
//! interior-point method with quaternion-aware updates. Step gradients come
//! from the implicit function theorem at a relaxed point on the central path.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ad;
pub mod contact;
pub mod diff;
pub mod dynamics;
pub mod ipsolver;
pub mod mech;
pub mod models;
pub mod quat;
pub mod sim;

mod error;

pub use error::{Error, Result};
