//! Builders for the mechanisms used by the tests and the experiment harness.

use nalgebra::{Matrix3, Vector3};

use crate::mech::{build_mechanism, Body, BodyConfig, ConeMode, ContactSpec, Joint, JointKind, Mechanism, Parent};
use crate::Result;

/// Solid box inertia about its center.
pub fn box_inertia(mass: f64, size: &Vector3<f64>) -> Matrix3<f64> {
    let (x2, y2, z2) = (size.x * size.x, size.y * size.y, size.z * size.z);
    Matrix3::from_diagonal(&Vector3::new(y2 + z2, x2 + z2, x2 + y2)) * (mass / 12.0)
}

/// The eight corners of a box centered at the origin.
pub fn box_corners(size: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let h = size / 2.0;
    let mut out = Vec::with_capacity(8);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                out.push(Vector3::new(sx * h.x, sy * h.y, sz * h.z));
            }
        }
    }
    out
}

/// Box with point contacts at `corners` against the floor `z = 0`.
pub fn box_on_floor(
    mass: f64,
    size: &Vector3<f64>,
    corners: &[Vector3<f64>],
    friction: f64,
    cone_mode: ConeMode,
    gravity: Vector3<f64>,
    timestep: f64,
) -> Result<Mechanism> {
    let body = Body {
        id: 0,
        mass,
        inertia: box_inertia(mass, size),
    };
    let contacts = corners
        .iter()
        .enumerate()
        .map(|(k, c)| ContactSpec {
            cone_mode,
            ..ContactSpec::floor(k, 0, *c, 0.0, friction)
        })
        .collect();
    build_mechanism(vec![body], Vec::new(), contacts, gravity, timestep)
}

/// Standard test box: 1 kg cube of side 0.5 m with all corners in contact.
pub fn unit_box(friction: f64, cone_mode: ConeMode, timestep: f64) -> Result<Mechanism> {
    let size = Vector3::repeat(0.5);
    box_on_floor(1.0, &size, &box_corners(&size), friction, cone_mode, gravity(), timestep)
}

/// Solid sphere touching the floor through a single sphere contact.
pub fn sphere_on_floor(mass: f64, radius: f64, friction: f64, timestep: f64) -> Result<Mechanism> {
    let body = Body {
        id: 0,
        mass,
        inertia: Matrix3::identity() * (0.4 * mass * radius * radius),
    };
    let contact = ContactSpec::floor(0, 0, Vector3::zeros(), radius, friction);
    build_mechanism(vec![body], Vec::new(), vec![contact], gravity(), timestep)
}

/// Single body without contacts.
pub fn free_body(mass: f64, inertia: Matrix3<f64>, gravity: Vector3<f64>, timestep: f64) -> Result<Mechanism> {
    build_mechanism(vec![Body { id: 0, mass, inertia }], Vec::new(), Vec::new(), gravity, timestep)
}

pub fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

/// Serial chain of uniform solid cylinders along `z`.
#[derive(Clone, Debug)]
pub struct ChainSpec {
    pub links: usize,
    pub length: f64,
    pub mass: f64,
    pub radius: f64,
    pub kind: JointKind,
    /// World anchor of the first link's top end; `None` for a floating chain.
    pub base: Option<Vector3<f64>>,
    /// Sphere contacts `(link, offset, radius)` against the floor.
    pub contacts: Vec<(usize, Vector3<f64>, f64)>,
    pub friction: f64,
    pub gravity: Vector3<f64>,
    pub timestep: f64,
}

impl ChainSpec {
    /// Revolute hinge axis of joint `k`, alternating between `x` and `y`.
    pub fn axis(k: usize) -> Vector3<f64> {
        if k.is_multiple_of(2) {
            Vector3::x()
        } else {
            Vector3::y()
        }
    }

    pub fn build(&self) -> Result<Mechanism> {
        let l = self.length;
        let m = self.mass;
        let r2 = self.radius * self.radius;
        let side = m * (3.0 * r2 + l * l) / 12.0;
        let rod = Matrix3::from_diagonal(&Vector3::new(side, side, m * r2 / 2.0));
        let bodies = (0..self.links)
            .map(|i| Body {
                id: i,
                mass: m,
                inertia: rod,
            })
            .collect();
        let top = Vector3::new(0.0, 0.0, l / 2.0);
        let mut joints = Vec::new();
        if let Some(base) = self.base {
            joints.push(Joint {
                id: 0,
                kind: self.kind,
                parent: Parent::World,
                child: 0,
                parent_anchor: base,
                child_anchor: top,
                axis: Self::axis(0),
                child_axis: None,
            });
        }
        for i in 1..self.links {
            joints.push(Joint {
                id: joints.len(),
                kind: self.kind,
                parent: Parent::Body(i - 1),
                child: i,
                parent_anchor: -top,
                child_anchor: top,
                axis: Self::axis(i),
                child_axis: None,
            });
        }
        let contacts = self
            .contacts
            .iter()
            .enumerate()
            .map(|(k, &(link, offset, radius))| ContactSpec::floor(k, link, offset, radius, self.friction))
            .collect();
        build_mechanism(bodies, joints, contacts, self.gravity, self.timestep)
    }

    /// Straight configuration hanging from the base (or from the origin).
    pub fn straight(&self) -> Vec<BodyConfig> {
        let base = self.base.unwrap_or_else(Vector3::zeros);
        (0..self.links)
            .map(|i| BodyConfig::at(base - Vector3::new(0.0, 0.0, (i as f64 + 0.5) * self.length)))
            .collect()
    }
}
