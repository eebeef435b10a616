//! Quaternion algebra, scalar-first `(s, v)`.
//!
//! The `*_g` helpers are generic over [`Real`] and operate on raw 4-vectors
//! so residuals can be differentiated through them; they do not renormalize.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::ad::{c, Real};
use crate::{Error, Result};

/// Tolerance used to accept a quaternion as unit on input.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    pub s: f64,
    pub v: Vector3<f64>,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl UnitQuaternion {
    pub fn identity() -> Self {
        Self {
            s: 1.0,
            v: Vector3::zeros(),
        }
    }

    /// Normalizes `(s, v)`; fails on a zero or non-finite input.
    pub fn normalize(s: f64, v: Vector3<f64>) -> Result<Self> {
        let n = (s * s + v.norm_squared()).sqrt();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidArgument(format!("cannot normalize quaternion ({s}, {v:?})")));
        }
        Ok(Self { s: s / n, v: v / n })
    }

    /// Accepts a 4-vector that is unit within [`UNIT_TOL`] and renormalizes it
    /// unless it is already unit to rounding, so stored quaternions round-trip.
    pub fn from_vec4(q: &Vector4<f64>) -> Result<Self> {
        check_unit(q)?;
        if (q.norm_squared() - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self {
                s: q[0],
                v: Vector3::new(q[1], q[2], q[3]),
            });
        }
        Self::normalize(q[0], Vector3::new(q[1], q[2], q[3]))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let h = 0.5 * angle;
        Self {
            s: h.cos(),
            v: axis * (h.sin() / n),
        }
    }

    pub fn to_vec4(&self) -> Vector4<f64> {
        Vector4::new(self.s, self.v.x, self.v.y, self.v.z)
    }

    pub fn conj(&self) -> Self {
        Self { s: self.s, v: -self.v }
    }

    pub fn norm(&self) -> f64 {
        (self.s * self.s + self.v.norm_squared()).sqrt()
    }

    /// Body-to-world rotation matrix.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotmat_g(&self.to_vec4())
    }

    pub fn rotate(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * x
    }
}

fn check_unit(q: &Vector4<f64>) -> Result<()> {
    let n = q.norm();
    if (n - 1.0).abs() > UNIT_TOL || !n.is_finite() {
        return Err(Error::InvalidArgument(format!("quaternion norm {n} is not unit")));
    }
    Ok(())
}

/// Hamilton product `qa ⊗ qb`, renormalized.
pub fn quat_mul(qa: &UnitQuaternion, qb: &UnitQuaternion) -> Result<UnitQuaternion> {
    check_unit(&qa.to_vec4())?;
    check_unit(&qb.to_vec4())?;
    let r = qmul_g(&qa.to_vec4(), &qb.to_vec4());
    UnitQuaternion::normalize(r[0], Vector3::new(r[1], r[2], r[3]))
}

/// Product of two quaternions that are already known to be unit.
pub(crate) fn mul_unit(qa: &UnitQuaternion, qb: &UnitQuaternion) -> UnitQuaternion {
    let r = qmul_g(&qa.to_vec4(), &qb.to_vec4());
    let n = r.norm();
    UnitQuaternion {
        s: r[0] / n,
        v: Vector3::new(r[1], r[2], r[3]) / n,
    }
}

pub fn skew(x: &Vector3<f64>) -> Matrix3<f64> {
    skew_g(x)
}

/// Left multiplication matrix: `lmat(a) * b = a ⊗ b`.
pub fn lmat(q: &UnitQuaternion) -> Matrix4<f64> {
    lmat_g(&q.to_vec4())
}

/// Right multiplication matrix: `rmat(b) * a = a ⊗ b`.
pub fn rmat(q: &UnitQuaternion) -> Matrix4<f64> {
    rmat_g(&q.to_vec4())
}

pub fn vmat() -> Matrix3x4<f64> {
    Matrix3x4::new(
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

pub fn tmat() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(1.0, -1.0, -1.0, -1.0))
}

/// `[0; I₃]`, the embedding of a 3-vector as a pure quaternion.
pub fn hmat() -> Matrix4x3<f64> {
    vmat().transpose()
}

/// Tangent basis `G(q) = lmat(q)·H` at a unit quaternion.
pub fn attitude_jacobian(q: &UnitQuaternion) -> Matrix4x3<f64> {
    attitude_jacobian_raw(&q.to_vec4())
}

pub fn attitude_jacobian_raw(q: &Vector4<f64>) -> Matrix4x3<f64> {
    lmat_g(q) * hmat()
}

/// `(√(1 − dᵀd), d)`; fails when `dᵀd ≥ 1`.
pub fn phi_map(d: &Vector3<f64>) -> Result<UnitQuaternion> {
    let n2 = d.norm_squared();
    if n2 >= 1.0 || !n2.is_finite() {
        return Err(Error::Domain(n2));
    }
    Ok(UnitQuaternion {
        s: (1.0 - n2).sqrt(),
        v: *d,
    })
}

/// `q ⊗ φ(d)`, the tangent-space retraction used by the solver.
pub fn retract(q: &UnitQuaternion, d: &Vector3<f64>) -> Result<UnitQuaternion> {
    Ok(mul_unit(q, &phi_map(d)?))
}

/// Inverse chart of [`retract`]: `V(q₀* ⊗ q)`.
pub fn local_coords(q0: &UnitQuaternion, q: &UnitQuaternion) -> Vector3<f64> {
    mul_unit(&q0.conj(), q).v
}

pub fn skew_g<S: Real>(x: &Vector3<S>) -> Matrix3<S> {
    let z = S::zero();
    Matrix3::new(
        z, -x[2], x[1], //
        x[2], z, -x[0], //
        -x[1], x[0], z,
    )
}

pub fn qmul_g<S: Real>(a: &Vector4<S>, b: &Vector4<S>) -> Vector4<S> {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

pub fn qconj_g<S: Real>(q: &Vector4<S>) -> Vector4<S> {
    Vector4::new(q[0], -q[1], -q[2], -q[3])
}

pub fn qvec_g<S: Real>(q: &Vector4<S>) -> Vector3<S> {
    Vector3::new(q[1], q[2], q[3])
}

pub fn lmat_g<S: Real>(q: &Vector4<S>) -> Matrix4<S> {
    let (s, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        s, -x, -y, -z, //
        x, s, -z, y, //
        y, z, s, -x, //
        z, -y, x, s,
    )
}

pub fn rmat_g<S: Real>(q: &Vector4<S>) -> Matrix4<S> {
    let (s, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix4::new(
        s, -x, -y, -z, //
        x, s, z, -y, //
        y, -z, s, x, //
        z, y, -x, s,
    )
}

/// Rotation matrix `(s² − vᵀv)I + 2vvᵀ + 2s·skew(v)`.
pub fn rotmat_g<S: Real>(q: &Vector4<S>) -> Matrix3<S> {
    let s = q[0];
    let v = qvec_g(q);
    let two = c::<S>(2.0);
    Matrix3::identity() * (s * s - v.dot(&v)) + v * v.transpose() * two + skew_g(&v) * (two * s)
}

pub fn lift_quat<S: Real>(q: &UnitQuaternion) -> Vector4<S> {
    Vector4::new(S::cst(q.s), S::cst(q.v.x), S::cst(q.v.y), S::cst(q.v.z))
}
