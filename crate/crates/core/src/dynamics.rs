//! Variational integrator residuals and momentum/energy diagnostics.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::ad::{c, Real};
use crate::mech::{Body, BodyConfig, Mechanism};
use crate::quat::{mul_unit, UnitQuaternion};
use crate::{Error, Result};

/// Applied force (world frame) and torque (body frame).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyInput {
    pub f: Vector3<f64>,
    pub tau: Vector3<f64>,
}

impl BodyInput {
    pub fn force(f: Vector3<f64>) -> Self {
        Self { f, tau: Vector3::zeros() }
    }
}

/// `m(p₊ − 2p + p₋)/h − hmg − Aᵀj − hf`.
#[allow(clippy::too_many_arguments)]
pub fn linear_residual(
    body: &Body,
    p_prev: &Vector3<f64>,
    p: &Vector3<f64>,
    p_next: &Vector3<f64>,
    g: &Vector3<f64>,
    h: f64,
    aj: &Vector3<f64>,
    f: &Vector3<f64>,
) -> Vector3<f64> {
    linear_residual_g(body.mass, p_prev, p, p_next, g, h, aj, f)
}

#[allow(clippy::too_many_arguments)]
pub fn linear_residual_g<S: Real>(
    m: S,
    p_prev: &Vector3<S>,
    p: &Vector3<S>,
    p_next: &Vector3<S>,
    g: &Vector3<S>,
    h: S,
    aj: &Vector3<S>,
    f: &Vector3<S>,
) -> Vector3<S> {
    (p_next - p * c::<S>(2.0) + p_prev) * (m / h) - g * (h * m) - aj - f * h
}

/// `√(1−ψ₊ᵀψ₊)Jψ₊ + ψ₊×Jψ₊ − √(1−ψᵀψ)Jψ + ψ×Jψ − Bᵀj − h²τ/2`.
///
/// `bj` is the joint/contact contribution already mapped into the body
/// tangent space. `q` is unused by the residual itself and kept for symmetry
/// with the impulse maps that depend on it.
pub fn rotational_residual(
    body: &Body,
    psi: &Vector3<f64>,
    psi_next: &Vector3<f64>,
    _q: &UnitQuaternion,
    bj: &Vector3<f64>,
    tau: &Vector3<f64>,
    h: f64,
) -> Result<Vector3<f64>> {
    for x in [psi, psi_next] {
        let n2 = x.norm_squared();
        if n2 >= 1.0 {
            return Err(Error::Domain(n2));
        }
    }
    Ok(rotational_residual_g(&body.inertia, psi, psi_next, bj, tau, h))
}

pub fn rotational_residual_g<S: Real>(
    j: &Matrix3<S>,
    psi: &Vector3<S>,
    psi_next: &Vector3<S>,
    bj: &Vector3<S>,
    tau: &Vector3<S>,
    h: S,
) -> Vector3<S> {
    let one = S::one();
    let s_next = (one - psi_next.dot(psi_next)).sqrt();
    let s = (one - psi.dot(psi)).sqrt();
    let jp_next = j * psi_next;
    let jp = j * psi;
    jp_next * s_next + psi_next.cross(&jp_next) - jp * s + psi.cross(&jp) - bj - tau * (h * h / c(2.0))
}

/// `q ⊗ (√(1−ψ₊ᵀψ₊), ψ₊)`.
pub fn recover_q_plus(q: &UnitQuaternion, psi_next: &Vector3<f64>) -> Result<UnitQuaternion> {
    crate::quat::retract(q, psi_next)
}

/// `V(q* ⊗ q₊)`; fails when the relative rotation reaches 180°.
pub fn psi_from_configs(q: &UnitQuaternion, q_next: &UnitQuaternion) -> Result<Vector3<f64>> {
    let r = mul_unit(&q.conj(), q_next);
    if r.s <= 0.0 {
        return Err(Error::ExcessiveRotation(r.s));
    }
    Ok(r.v)
}

/// Discrete linear momentum `Σ m(p₊ − p)/h` of the interval `[z, z₊]`.
pub fn linear_momentum(mech: &Mechanism, z: &[BodyConfig], z_next: &[BodyConfig], h: f64) -> Vector3<f64> {
    mech.bodies
        .iter()
        .zip(z.iter().zip(z_next))
        .map(|(b, (x, xn))| (xn.p - x.p) * (b.mass / h))
        .sum()
}

/// Discrete angular momentum about the world origin of the interval `[z, z₊]`.
///
/// The rotational part is the discrete Legendre transform of the integrator,
/// `R(q)(2/h)(s₊Jψ₊ + ψ₊×Jψ₊)`, which the residual conserves exactly.
pub fn angular_momentum(mech: &Mechanism, z: &[BodyConfig], z_next: &[BodyConfig], h: f64) -> Vector3<f64> {
    let mut l = Vector3::zeros();
    for (b, (x, xn)) in mech.bodies.iter().zip(z.iter().zip(z_next)) {
        let v = (xn.p - x.p) / h;
        l += x.p.cross(&v) * b.mass;
        let psi = mul_unit(&x.q.conj(), &xn.q).v;
        let s = (1.0 - psi.norm_squared()).max(0.0).sqrt();
        let jp = b.inertia * psi;
        l += x.q.rotate(&((jp * s + psi.cross(&jp)) * (2.0 / h)));
    }
    l
}

/// Kinetic plus gravitational potential energy of the interval `[z, z₊]`.
/// Angular velocity is approximated by `2ψ₊/h`; diagnostic only.
pub fn energy(mech: &Mechanism, z: &[BodyConfig], z_next: &[BodyConfig], h: f64) -> f64 {
    let mut e = 0.0;
    for (b, (x, xn)) in mech.bodies.iter().zip(z.iter().zip(z_next)) {
        let v = (xn.p - x.p) / h;
        let w = mul_unit(&x.q.conj(), &xn.q).v * (2.0 / h);
        e += 0.5 * b.mass * v.norm_squared() + 0.5 * w.dot(&(b.inertia * w));
        e -= b.mass * mech.gravity.dot(&x.p);
    }
    e
}
