mod common;

use std::time::Instant;

use common::{one_corner_box, pendulum, random_chain_state, random_corner_state};
use dojo_core::contact::assemble_ncp;
use dojo_core::diff::{fd_step_oracle, implicit_step_gradients, StepJacobians};
use dojo_core::dynamics::BodyInput;
use dojo_core::ipsolver::{self, NcpProblem, SolverOptions};
use dojo_core::mech::{BodyConfig, ConeMode, Mechanism};
use dojo_core::models;
use dojo_core::quat::UnitQuaternion;
use dojo_core::sim::{init_from_velocity, step, SimOptions, SimState};
use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-6;

fn jacobians(mech: &Mechanism, st: &SimState, u: &[BodyInput], kappa: f64) -> (Vec<f64>, StepJacobians) {
    let p = assemble_ncp(mech, &st.z_prev, &st.z, u).unwrap();
    let opts = SolverOptions {
        kappa_grad: Some(kappa),
        ..Default::default()
    };
    let res = ipsolver::solve(&p, &p.initial_point(None), &opts).unwrap();
    assert!(res.converged());
    let jac = implicit_step_gradients(&p, &res, kappa).unwrap();
    assert!(!jac.fallback);
    (p.theta().to_vec(), jac)
}

/// Largest relative error between implicit and finite-difference directional
/// derivatives over `dirs` random θ directions.
fn directional_error<R: Rng>(
    rng: &mut R,
    mech: &Mechanism,
    st: &SimState,
    u: &[BodyInput],
    kappa: f64,
    dirs: usize,
) -> f64 {
    let (theta, jac) = jacobians(mech, st, u, kappa);
    let full = jac.full();
    let mut worst = 0.0f64;
    for _ in 0..dirs {
        let dir = DVector::from_fn(full.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let fd = fd_step_oracle(mech, &theta, &dir, FD_STEP, kappa, &SolverOptions::default()).unwrap();
        let implicit = &full * &dir;
        worst = worst.max((fd - &implicit).amax() / implicit.amax());
    }
    worst
}

fn random_input<R: Rng>(rng: &mut R, scale: f64) -> BodyInput {
    let mut v = || Vector3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale));
    BodyInput { f: v(), tau: v() * 0.1 }
}

fn random_free_state<R: Rng>(rng: &mut R, mech: &Mechanism) -> SimState {
    let mut v = |r: f64| Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r));
    let q = UnitQuaternion::from_axis_angle(&v(1.0), 1.0);
    let z = [BodyConfig::new(v(1.0), q)];
    init_from_velocity(mech, &z, &[v(2.0)], &[v(3.0)]).unwrap()
}

fn free_body(h: f64) -> Mechanism {
    models::free_body(2.0, Matrix3::from_diagonal(&Vector3::new(0.1, 0.2, 0.3)), models::gravity(), h).unwrap()
}

#[test]
fn free_body_force_gradient_is_analytic() {
    let h = 0.01;
    let mech = free_body(h);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let st = random_free_state(&mut rng, &mech);
        let (_, jac) = jacobians(&mech, &st, &[random_input(&mut rng, 1.0)], 3e-4);
        let block = jac.d_u.view((0, 0), (3, 3)).into_owned();
        assert!((block - Matrix3::identity() * (h * h / 2.0)).amax() < 1e-8);
    }
}

#[test]
fn jacobian_shapes_follow_tangent_layout() {
    let mech = models::unit_box(0.5, ConeMode::Nonlinear, 0.01).unwrap();
    let z = vec![BodyConfig::at(Vector3::new(0.0, 0.0, 0.3))];
    let (_, jac) = jacobians(&mech, &SimState::at_rest(z), &[BodyInput::default()], 3e-4);
    assert_eq!(jac.d_zprev.shape(), (6, 6));
    assert_eq!(jac.d_z.shape(), (6, 6));
    assert_eq!(jac.d_u.shape(), (6, 6));
    assert_eq!(jac.d_params.shape(), (6, 4 * 8 + 7 + 1));
    assert_eq!(jac.kappa_grad, 3e-4);
}

#[test]
fn smooth_system_matches_finite_differences_tightly() {
    let mech = free_body(0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let st = random_free_state(&mut rng, &mech);
        let u = [random_input(&mut rng, 1.0)];
        let err = directional_error(&mut rng, &mech, &st, &u, 3e-4, 3);
        assert!(err < 1e-6, "{err}");
    }
}

#[test]
fn zero_direction_gives_zero() {
    let mech = one_corner_box(0.5, ConeMode::Nonlinear, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let st = random_corner_state(&mut rng, &mech, 0.02, 0.5);
    let (theta, jac) = jacobians(&mech, &st, &[BodyInput::default()], 1e-2);
    let dir = DVector::zeros(jac.full().ncols());
    let fd = fd_step_oracle(&mech, &theta, &dir, FD_STEP, 1e-2, &SolverOptions::default()).unwrap();
    assert_eq!(fd.amax(), 0.0);
    assert!(fd_step_oracle(&mech, &theta, &dir, 0.0, 1e-2, &SolverOptions::default()).is_err());
}

#[test]
fn one_contact_box_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kappa in [1e-2, 1e-3, 3e-4] {
        let mut worst = 0.0f64;
        for trial in 0..20 {
            let mode = if trial % 2 == 0 { ConeMode::Nonlinear } else { ConeMode::Linearized };
            let mech = one_corner_box(rng.random_range(0.2..1.0), mode, 0.01);
            let st = random_corner_state(&mut rng, &mech, 0.03, 0.5);
            let u = [random_input(&mut rng, 2.0)];
            worst = worst.max(directional_error(&mut rng, &mech, &st, &u, kappa, 2));
        }
        assert!(worst < 1e-3, "κ = {kappa}: {worst}");
    }
}

#[test]
fn chain_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = pendulum(3, vec![(2, Vector3::new(0.0, 0.0, -0.2), 0.05)], 0.01);
    let mech = spec.build().unwrap();
    for kappa in [1e-2, 1e-3, 3e-4] {
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let st = random_chain_state(&mut rng, &spec, 0.6, 2.0);
            let u: Vec<_> = (0..3).map(|_| random_input(&mut rng, 1.0)).collect();
            worst = worst.max(directional_error(&mut rng, &mech, &st, &u, kappa, 2));
        }
        assert!(worst < 1e-3, "κ = {kappa}: {worst}");
    }
}

#[test]
fn activation_boundary_is_differentiable() {
    // corner touching the floor with zero normal velocity
    let mech = one_corner_box(0.5, ConeMode::Nonlinear, 0.01);
    let corner = mech.contacts[0].offset;
    let z = [BodyConfig::at(Vector3::new(0.0, 0.0, -corner.z))];
    let st = init_from_velocity(&mech, &z, &[Vector3::new(0.2, 0.0, 0.0)], &[Vector3::zeros()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let err = directional_error(&mut rng, &mech, &st, &[BodyInput::default()], 1e-2, 5);
    assert!(err.is_finite() && err < 1e-3, "{err}");
}

fn resting_height_gradient(fz: f64, kappa: f64) -> f64 {
    let mech = models::unit_box(0.5, ConeMode::Nonlinear, 0.1).unwrap();
    let z = vec![BodyConfig::at(Vector3::new(0.0, 0.0, 0.25))];
    let (_, jac) = jacobians(&mech, &SimState::at_rest(z), &[BodyInput::force(Vector3::new(0.0, 0.0, fz))], kappa);
    jac.d_u[(2, 2)]
}

#[test]
fn resting_box_height_gradient_vanishes_as_kappa_shrinks() {
    let free = 0.1 * 0.1 / 1.0;
    for fz in [0.0, 2.0, 4.0] {
        let g: Vec<f64> = [3e-4, 1e-3, 1e-2].iter().map(|&k| resting_height_gradient(fz, k)).collect();
        assert!(g[0] < 0.05 * free, "f_z = {fz}: {g:?}");
        assert!(g[0] < g[1] && g[1] < g[2], "f_z = {fz}: {g:?}");
    }
}

#[test]
fn larger_kappa_gives_smoother_force_sweep() {
    let forces: Vec<f64> = (0..=30).map(|k| k as f64).collect();
    let variation = |kappa: f64| {
        let g: Vec<f64> = forces.iter().map(|&f| resting_height_gradient(f, kappa)).collect();
        g.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>()
    };
    let tv: Vec<f64> = [1e-2, 1e-3, 3e-4].iter().map(|&k| variation(k)).collect();
    assert!(tv[0] <= tv[1] && tv[1] <= tv[2], "{tv:?}");
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn gradient_cost_is_a_small_multiple_of_a_step() {
    let spec = pendulum(
        5,
        vec![(3, Vector3::new(0.0, 0.0, -0.2), 0.05), (4, Vector3::new(0.0, 0.0, -0.2), 0.05)],
        0.01,
    );
    let mech = spec.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let opts = SimOptions::default();
    let u = vec![BodyInput::default(); 5];
    let (mut steps, mut grads) = (Vec::new(), Vec::new());
    for _ in 0..15 {
        let st = random_chain_state(&mut rng, &spec, 0.3, 1.0);
        let t0 = Instant::now();
        let (_, res) = step(&mech, &st, &u, &opts, None).unwrap();
        steps.push(t0.elapsed().as_secs_f64());
        let p = assemble_ncp(&mech, &st.z_prev, &st.z, &u).unwrap();
        let so = SolverOptions {
            kappa_grad: Some(3e-4),
            ..Default::default()
        };
        let solved = ipsolver::solve(&p, &p.initial_point(None), &so).unwrap();
        let t1 = Instant::now();
        let jac = implicit_step_gradients(&p, &solved, 3e-4).unwrap();
        grads.push(t1.elapsed().as_secs_f64());
        assert_eq!(jac.d_z.shape(), (30, 30));
        assert_eq!(res.status, ipsolver::SolveStatus::Converged);
    }
    let ratio = median(grads) / median(steps);
    assert!(ratio < 10.0, "gradient/step time ratio {ratio}");
}
