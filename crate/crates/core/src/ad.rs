//! Forward-mode dual numbers for exact residual Jacobians.
//!
//! Residual blocks are written once, generic over [`Real`], and evaluated
//! either with `f64` (values) or with [`Dual`] (one directional derivative per
//! pass). Seeding one raw coordinate at a time gives one Jacobian column.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use nalgebra::{Matrix3, Vector3, Vector4};
use num_traits::{One, Zero};

/// Scalar type accepted by the generic residual code.
pub trait Real:
    nalgebra::Scalar
    + Copy
    + Debug
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    /// A constant (zero derivative).
    fn cst(x: f64) -> Self;
    /// A value whose derivative is one if `seeded`, zero otherwise.
    fn seeded(x: f64, seeded: bool) -> Self;
    /// The primal value.
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn seeded(x: f64, _seeded: bool) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// First-order dual number `re + du·ε`, `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub const fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }
}

impl Real for Dual {
    #[inline]
    fn cst(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    #[inline]
    fn seeded(x: f64, seeded: bool) -> Self {
        Dual::new(x, if seeded { 1.0 } else { 0.0 })
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.du / (2.0 * s))
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.re;
        Dual::new(self.re * inv, (self.du * o.re - self.re * o.du) * inv * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl DivAssign for Dual {
    #[inline]
    fn div_assign(&mut self, o: Dual) {
        *self = *self / o;
    }
}

impl Zero for Dual {
    fn zero() -> Self {
        Dual::new(0.0, 0.0)
    }
    fn is_zero(&self) -> bool {
        self.re == 0.0 && self.du == 0.0
    }
}

impl One for Dual {
    fn one() -> Self {
        Dual::new(1.0, 0.0)
    }
}

/// Shorthand for a constant of any [`Real`] type.
#[inline]
pub fn c<S: Real>(x: f64) -> S {
    S::cst(x)
}

pub fn lift3<S: Real>(v: &Vector3<f64>) -> Vector3<S> {
    v.map(S::cst)
}

pub fn lift4<S: Real>(v: &Vector4<f64>) -> Vector4<S> {
    v.map(S::cst)
}

pub fn lift33<S: Real>(m: &Matrix3<f64>) -> Matrix3<S> {
    m.map(S::cst)
}

pub fn values3<S: Real>(v: &Vector3<S>) -> Vector3<f64> {
    v.map(|x| x.value())
}

pub fn derivs3(v: &Vector3<Dual>) -> Vector3<f64> {
    v.map(|x| x.du)
}
