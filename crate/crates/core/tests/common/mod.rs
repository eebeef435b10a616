#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Damped Newton with a forward-difference Jacobian. Entries flagged in
/// `positive` stay strictly positive through a fraction-to-boundary rule.
pub fn newton<F>(f: F, x0: &[f64], positive: &[bool], tol: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = DVector::from_column_slice(x0);
    for _ in 0..500 {
        let r = f(&x);
        if r.amax() < tol {
            return x;
        }
        let n = x.len();
        let mut jac = DMatrix::zeros(r.len(), n);
        for j in 0..n {
            let h = 1e-7 * x[j].abs().max(1e-3);
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            jac.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * h)));
        }
        let dx = jac.lu().solve(&(-&r)).expect("oracle Jacobian singular");
        let mut alpha: f64 = 1.0;
        for j in 0..n {
            if positive[j] && dx[j] < 0.0 {
                alpha = alpha.min(-0.9 * x[j] / dx[j]);
            }
        }
        let norm = r.norm();
        loop {
            let xn = &x + &dx * alpha;
            if f(&xn).norm() < norm || alpha < 1e-12 {
                x = xn;
                break;
            }
            alpha *= 0.5;
        }
    }
    panic!("oracle Newton did not converge");
}

/// Max entrywise error relative to the largest reference entry.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-300)
}

use dojo_core::mech::{BodyConfig, ConeMode, Mechanism};
use dojo_core::models;
use dojo_core::quat::UnitQuaternion;
use dojo_core::sim::{init_from_velocity, SimState};
use nalgebra::Vector3;
use rand::Rng;

/// Unit box touching the floor through its `(-,-,-)` corner only.
pub fn one_corner_box(friction: f64, mode: ConeMode, h: f64) -> Mechanism {
    let size = Vector3::repeat(0.5);
    models::box_on_floor(1.0, &size, &[-size / 2.0], friction, mode, models::gravity(), h).unwrap()
}

fn uniform3<R: Rng>(rng: &mut R, r: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

/// Random tilted pose with the contact corner between 0 and `gap` above the
/// floor, moving with random linear and angular velocity.
pub fn random_corner_state<R: Rng>(rng: &mut R, mech: &Mechanism, gap: f64, speed: f64) -> SimState {
    let q = UnitQuaternion::from_axis_angle(&uniform3(rng, 1.0), rng.random_range(0.0..0.4));
    let corner = q.rotate(&mech.contacts[0].offset);
    let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..gap) - corner.z);
    let v = uniform3(rng, speed);
    let w = uniform3(rng, speed);
    init_from_velocity(mech, &[BodyConfig::new(p, q)], &[v], &[w]).unwrap()
}

use dojo_core::mech::JointKind;
use dojo_core::models::ChainSpec;

pub fn pendulum(links: usize, contacts: Vec<(usize, Vector3<f64>, f64)>, h: f64) -> ChainSpec {
    ChainSpec {
        links,
        length: 0.4,
        mass: 1.0,
        radius: 0.05,
        kind: JointKind::Revolute,
        base: Some(Vector3::new(0.0, 0.0, 0.4 * links as f64 + 0.05)),
        contacts,
        friction: 0.5,
        gravity: models::gravity(),
        timestep: h,
    }
}

/// Forward kinematics of a based chain from its joint angles.
pub fn chain_configs(spec: &ChainSpec, angles: &[f64]) -> Vec<BodyConfig> {
    let top = Vector3::new(0.0, 0.0, spec.length / 2.0);
    let mut anchor = spec.base.expect("based chain");
    let mut q = UnitQuaternion::identity();
    let mut out = Vec::with_capacity(spec.links);
    for (i, &a) in angles.iter().enumerate() {
        q = dojo_core::quat::quat_mul(&q, &UnitQuaternion::from_axis_angle(&ChainSpec::axis(i), a)).unwrap();
        let p = anchor - q.rotate(&top);
        anchor = p - q.rotate(&top);
        out.push(BodyConfig::new(p, q));
    }
    out
}

/// Chain state with random joint angles and rates.
pub fn random_chain_state<R: Rng>(rng: &mut R, spec: &ChainSpec, max_angle: f64, max_rate: f64) -> SimState {
    let angles: Vec<f64> = (0..spec.links).map(|_| rng.random_range(-max_angle..max_angle)).collect();
    let prev: Vec<f64> = angles
        .iter()
        .map(|a| a - spec.timestep * rng.random_range(-max_rate..max_rate))
        .collect();
    SimState {
        z_prev: chain_configs(spec, &prev),
        z: chain_configs(spec, &angles),
    }
}
