mod common;

use common::{one_corner_box, random_corner_state};
use dojo_core::contact::{assemble_ncp, StepProblem};
use dojo_core::diff::{relaxed_step, retract_theta};
use dojo_core::dynamics::BodyInput;
use dojo_core::ipsolver::{self, NcpProblem, SolverOptions, SolverPoint};
use dojo_core::mech::{BodyConfig, ConeMode};
use dojo_core::models;
use dojo_core::quat::{local_coords, UnitQuaternion};
use dojo_core::sim::init_from_velocity;
use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tight() -> SolverOptions {
    SolverOptions {
        r_tol: 1e-10,
        kappa_tol: 1e-10,
        ..Default::default()
    }
}

/// Resting contacts sit `s ≈ κ/γ` above the floor, which costs an extra
/// impulse `m·s/h`; resolving the weight to 1e-8 needs κ near 1e-12.
fn resting() -> SolverOptions {
    SolverOptions {
        kappa_tol: 1e-12,
        ..tight()
    }
}

fn solve(problem: &StepProblem, opts: &SolverOptions) -> ipsolver::SolveResult {
    let res = ipsolver::solve(problem, &problem.initial_point(None), opts).unwrap();
    assert!(res.converged(), "{:?} after {} iterations", res.status, res.iterations);
    res
}

#[test]
fn free_fall_step_matches_closed_form() {
    let h = 0.01;
    let mech = models::free_body(1.5, Matrix3::from_diagonal(&Vector3::new(0.1, 0.2, 0.3)), models::gravity(), h).unwrap();
    let z = [BodyConfig::at(Vector3::new(0.3, -0.1, 2.0))];
    let st = init_from_velocity(&mech, &z, &[Vector3::new(1.0, 0.5, -2.0)], &[Vector3::zeros()]).unwrap();
    let p = assemble_ncp(&mech, &st.z_prev, &st.z, &[BodyInput::default()]).unwrap();
    let res = solve(&p, &tight());
    let next = p.next_configs(&res.w);
    let expected = z[0].p * 2.0 - st.z_prev[0].p + models::gravity() * h * h;
    assert!((next[0].p - expected).amax() < 1e-10);
}

#[test]
fn resting_box_carries_its_weight() {
    let h = 0.01;
    for mode in [ConeMode::Nonlinear, ConeMode::Linearized] {
        let mech = models::unit_box(0.5, mode, h).unwrap();
        let z = vec![BodyConfig::at(Vector3::new(0.0, 0.0, 0.25))];
        let p = assemble_ncp(&mech, &z, &z, &[BodyInput::default()]).unwrap();
        let res = solve(&p, &resting());
        let states: Vec<_> = (0..8).map(|k| p.contact_state(&res.w, k)).collect();
        let total: f64 = states.iter().map(|c| c.gamma).sum();
        assert!((total - 9.81 * h).abs() < 1e-8, "{mode:?}: {total}");
        let min_phi = states.iter().map(|c| c.phi).fold(f64::INFINITY, f64::min);
        assert!((0.0..=1e-6).contains(&min_phi), "{mode:?}: {min_phi}");
    }
}

#[test]
fn iterates_stay_interior_and_acceptance_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..40 {
        let mode = if trial % 2 == 0 { ConeMode::Nonlinear } else { ConeMode::Linearized };
        let mech = one_corner_box(rng.random_range(0.1..1.0), mode, 0.01);
        let st = random_corner_state(&mut rng, &mech, 0.05, 1.0);
        let p = assemble_ncp(&mech, &st.z_prev, &st.z, &[BodyInput::default()]).unwrap();
        let res = solve(&p, &SolverOptions::default());
        assert!(res.trace.iter().all(|r| r.interior));
        let cones = &p.layout().cones;
        assert!(cones.is_interior(&res.w.b) && cones.is_interior(&res.w.c));
        for pair in res.trace.windows(2) {
            assert!(pair[1].r_vio <= pair[0].r_vio || pair[1].kappa_vio <= pair[0].kappa_vio);
        }
    }
}

#[test]
fn converged_points_meet_tolerances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for opts in [SolverOptions::default(), tight()] {
        for _ in 0..10 {
            let mech = one_corner_box(0.7, ConeMode::Nonlinear, 0.01);
            let st = random_corner_state(&mut rng, &mech, 0.05, 1.0);
            let p = assemble_ncp(&mech, &st.z_prev, &st.z, &[BodyInput::default()]).unwrap();
            let res = solve(&p, &opts);
            let (r_vio, kappa_vio) = ipsolver::violations(&p, &res.w);
            assert!(r_vio < opts.r_tol && kappa_vio < opts.kappa_tol, "{r_vio} {kappa_vio}");
        }
    }
}

#[test]
fn one_contact_steps_converge_quickly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..100 {
        let mode = if trial % 2 == 0 { ConeMode::Nonlinear } else { ConeMode::Linearized };
        let mech = one_corner_box(rng.random_range(0.1..1.0), mode, 0.01);
        let st = random_corner_state(&mut rng, &mech, 0.05, 1.0);
        let p = assemble_ncp(&mech, &st.z_prev, &st.z, &[BodyInput::default()]).unwrap();
        let res = solve(&p, &SolverOptions::default());
        assert!(res.iterations <= 50, "trial {trial}: {} iterations", res.iterations);
        assert!(res.trace.iter().all(|r| r.interior));
    }
}

/// Tangent difference `(w_a − w_b)`, with quaternions compared about `w0`.
fn point_difference(w0: &SolverPoint, wa: &SolverPoint, wb: &SolverPoint) -> DVector<f64> {
    let mut out: Vec<f64> = (&wa.euclid - &wb.euclid).iter().copied().collect();
    for i in 0..w0.quats.len() {
        let d = local_coords(&w0.quats[i], &wa.quats[i]) - local_coords(&w0.quats[i], &wb.quats[i]);
        out.extend(d.iter());
    }
    out.extend((&wa.b - &wb.b).iter());
    out.extend((&wa.c - &wb.c).iter());
    DVector::from_vec(out)
}

#[test]
fn sensitivity_matches_central_differences() {
    let kappa = 1e-5;
    let delta = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mech = one_corner_box(0.5, ConeMode::Nonlinear, 0.01);
    let st = random_corner_state(&mut rng, &mech, 0.02, 0.5);
    let u = [BodyInput {
        f: Vector3::new(0.3, -0.2, 0.1),
        tau: Vector3::new(0.01, 0.0, -0.02),
    }];
    let p = assemble_ncp(&mech, &st.z_prev, &st.z, &u).unwrap();
    let tl = p.theta_layout();
    let opts = SolverOptions::default();
    let w0 = relaxed_step(&p, &opts, kappa).unwrap();
    let sens = ipsolver::sensitivity(&p, &w0).unwrap();
    for _ in 0..10 {
        let dir = DVector::from_fn(tl.tangent_len(), |_, _| rng.random_range(-1.0..1.0));
        let at = |eps: f64| {
            let q = StepProblem::from_theta(&mech, retract_theta(&tl, p.theta(), &dir, eps).unwrap()).unwrap();
            relaxed_step(&q, &opts, kappa).unwrap()
        };
        let fd = point_difference(&w0, &at(delta), &at(-delta)) / (2.0 * delta);
        let implicit = &sens * &dir;
        let err = (&fd - &implicit).amax() / implicit.amax();
        assert!(err < 1e-3, "relative error {err}");
    }
}

#[test]
fn rotated_resting_box_has_same_impulse_total() {
    let h = 0.01;
    let mech = models::unit_box(0.5, ConeMode::Nonlinear, h).unwrap();
    // a quarter turn about z maps the box onto itself
    let q = UnitQuaternion::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2);
    let z = vec![BodyConfig::new(Vector3::new(0.4, -0.3, 0.25), q)];
    let p = assemble_ncp(&mech, &z, &z, &[BodyInput::default()]).unwrap();
    let res = solve(&p, &resting());
    let total: f64 = (0..8).map(|k| p.contact_state(&res.w, k).gamma).sum();
    assert!((total - 9.81 * h).abs() < 1e-8);
    let next = p.next_configs(&res.w);
    assert!((next[0].p - z[0].p).amax() < 1e-8);
}

#[test]
fn random_pose_solve_is_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mech = one_corner_box(0.4, ConeMode::Linearized, 0.01);
    let st = random_corner_state(&mut rng, &mech, 0.05, 1.0);
    let p = assemble_ncp(&mech, &st.z_prev, &st.z, &[BodyInput::default()]).unwrap();
    let a = solve(&p, &SolverOptions::default());
    let b = solve(&p, &SolverOptions::default());
    assert_eq!(a.w, b.w);
    assert_eq!(a.iterations, b.iterations);
}
