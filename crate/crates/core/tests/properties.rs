use dojo_core::dynamics::{linear_residual, rotational_residual};
use dojo_core::ipsolver::{alpha_orthant, alpha_soc, cone_search, ConeLayout, NcpProblem};
use dojo_core::mech::{
    forest_order, joint_jacobian, joint_residual, Body, BodyConfig, Joint, JointKind, Parent,
};
use dojo_core::models::ChainSpec;
use dojo_core::quat::{attitude_jacobian, lmat, phi_map, quat_mul, rmat, vmat, UnitQuaternion};
use dojo_core::{contact::assemble_ncp, ipsolver};
use nalgebra::{DVector, Matrix3, Vector3, Vector4};
use proptest::prelude::*;

fn unit_quat() -> impl Strategy<Value = UnitQuaternion> {
    prop::array::uniform4(-1.0..1.0f64)
        .prop_filter("non-degenerate", |a| a.iter().map(|x| x * x).sum::<f64>() > 0.05)
        .prop_map(|a| UnitQuaternion::normalize(a[0], Vector3::new(a[1], a[2], a[3])).unwrap())
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-r..r).prop_map(|a| Vector3::new(a[0], a[1], a[2]))
}

fn pose() -> impl Strategy<Value = BodyConfig> {
    (vec3(2.0), unit_quat()).prop_map(|(p, q)| BodyConfig::new(p, q))
}

fn soc_interior(l: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0..1.0f64, l - 1), 1e-3..1.0f64).prop_map(|(tail, margin)| {
        let n = tail.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut y = vec![n + margin];
        y.extend(tail);
        y
    })
}

fn in_closed_soc(y: &[f64], tol: f64) -> bool {
    y[0] - y[1..].iter().map(|x| x * x).sum::<f64>().sqrt() >= -tol
}

fn in_open_soc(y: &[f64]) -> bool {
    y[0] - y[1..].iter().map(|x| x * x).sum::<f64>().sqrt() > 0.0
}

fn axpy(y: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    y.iter().zip(d).map(|(y, d)| y + a * d).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn product_of_unit_quaternions_is_unit(qa in unit_quat(), qb in unit_quat()) {
        let q = quat_mul(&qa, &qb).unwrap();
        prop_assert!((q.to_vec4().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn left_and_right_multiplication_commute(qa in unit_quat(), qb in unit_quat()) {
        let d = lmat(&qa) * rmat(&qb) - rmat(&qb) * lmat(&qa);
        prop_assert!(d.amax() < 1e-12);
    }

    #[test]
    fn lmat_is_orthogonal_and_agrees_with_rmat(qa in unit_quat(), qb in unit_quat()) {
        let l = lmat(&qa);
        prop_assert!((l.transpose() * l - nalgebra::Matrix4::identity()).amax() < 1e-12);
        prop_assert!((l * qb.to_vec4() - rmat(&qb) * qa.to_vec4()).amax() < 1e-12);
    }

    #[test]
    fn phi_map_vector_part_is_exact(d in vec3(0.57)) {
        let q = phi_map(&d).unwrap();
        prop_assert_eq!(vmat() * q.to_vec4(), d);
    }

    #[test]
    fn attitude_jacobian_is_orthonormal_tangent_basis(q in unit_quat()) {
        let g = attitude_jacobian(&q);
        prop_assert!((q.to_vec4().transpose() * g).amax() < 1e-12);
        prop_assert!((g.transpose() * g - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn retraction_is_first_order(q in unit_quat(), dir in vec3(1.0)) {
        prop_assume!(dir.norm() > 1e-3);
        let d = dir.normalize() * 1e-6;
        let exact = quat_mul(&q, &phi_map(&d).unwrap()).unwrap().to_vec4() - q.to_vec4();
        let linear = lmat(&q) * Vector4::new(0.0, d.x, d.y, d.z);
        prop_assert!((exact - linear).norm() / linear.norm() < 1e-4);
    }

    #[test]
    fn orthant_step_is_maximal_and_feasible(
        y in prop::collection::vec(1e-3..2.0f64, 1..6),
        d in prop::collection::vec(-3.0..3.0f64, 6),
    ) {
        let d = &d[..y.len()];
        let a = alpha_orthant(&y, d);
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert!(axpy(&y, a, d).iter().all(|&v| v >= -1e-12));
        if a < 1.0 {
            prop_assert!(axpy(&y, 1.01 * a, d).iter().any(|&v| v <= 0.0));
        }
    }

    #[test]
    fn soc_step_is_maximal_and_feasible(
        y in soc_interior(3),
        d in prop::collection::vec(-3.0..3.0f64, 3),
    ) {
        let a = alpha_soc(&y, &d);
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert!(in_closed_soc(&axpy(&y, a, &d), 1e-9));
        if a < 1.0 {
            prop_assert!(!in_open_soc(&axpy(&y, 1.01 * a, &d)));
        }
    }

    #[test]
    fn cone_search_keeps_every_block_interior(
        b in (prop::collection::vec(1e-2..2.0f64, 2), soc_interior(3)),
        c in (prop::collection::vec(1e-2..2.0f64, 2), soc_interior(3)),
        db in prop::collection::vec(-3.0..3.0f64, 5),
        dc in prop::collection::vec(-3.0..3.0f64, 5),
        tau in 0.5..0.99f64,
    ) {
        let layout = ConeLayout::new(2, vec![3]);
        let join = |(o, s): (Vec<f64>, Vec<f64>)| DVector::from_vec([o, s].concat());
        let (b, c) = (join(b), join(c));
        let (db, dc) = (DVector::from_vec(db), DVector::from_vec(dc));
        let a = cone_search(&layout, &b, &c, &db, &dc, tau, tau);
        prop_assert!(a > 0.0 && a <= 1.0);
        let (nb, nc) = (&b + &db * a, &c + &dc * a);
        prop_assert!(layout.is_interior(&nb) && layout.is_interior(&nc));
    }

    #[test]
    fn linear_residual_is_translation_invariant(
        p in (vec3(1.0), vec3(1.0), vec3(1.0)),
        shift in vec3(100.0),
        aj in vec3(1.0),
        f in vec3(1.0),
        mass in 0.1..10.0f64,
    ) {
        let body = Body { id: 0, mass, inertia: Matrix3::identity() };
        let g = Vector3::zeros();
        let r0 = linear_residual(&body, &p.0, &p.1, &p.2, &g, 0.01, &aj, &f);
        let r1 = linear_residual(&body, &(p.0 + shift), &(p.1 + shift), &(p.2 + shift), &g, 0.01, &aj, &f);
        prop_assert!((r0 - r1).amax() < 1e-9 * (1.0 + r0.amax()));
    }

    #[test]
    fn torque_free_symmetric_spin_is_preserved(psi in vec3(0.5)) {
        let body = Body { id: 0, mass: 1.0, inertia: Matrix3::identity() };
        let z = Vector3::zeros();
        let r = rotational_residual(&body, &psi, &psi, &UnitQuaternion::identity(), &z, &z, 0.01).unwrap();
        prop_assert!(r.amax() < 1e-15);
    }
}

/// Child pose that satisfies `joint` for a given parent pose, with equal orientations.
fn satisfied_child(joint: &Joint, xa: &BodyConfig) -> BodyConfig {
    let p = xa.p + xa.q.rotate(&joint.parent_anchor) - xa.q.rotate(&joint.child_anchor);
    BodyConfig::new(p, xa.q)
}

/// Child pose rotated by `rot` (world frame) about the world anchor point.
fn rotate_about_anchor(joint: &Joint, xa: &BodyConfig, xb: &BodyConfig, rot: &UnitQuaternion) -> BodyConfig {
    let anchor = xa.p + xa.q.rotate(&joint.parent_anchor);
    BodyConfig::new(anchor + rot.rotate(&(xb.p - anchor)), quat_mul(rot, &xb.q).unwrap())
}

/// Child poses reached by moving along each free degree of freedom by `t`.
fn free_motions(joint: &Joint, xa: &BodyConfig, xb: &BodyConfig, t: f64) -> Vec<BodyConfig> {
    let world_axis = xa.q.rotate(&joint.axis);
    match joint.kind {
        JointKind::Fixed => vec![],
        JointKind::Revolute => vec![rotate_about_anchor(joint, xa, xb, &UnitQuaternion::from_axis_angle(&world_axis, t))],
        JointKind::Prismatic => vec![BodyConfig::new(xb.p + world_axis.normalize() * t, xb.q)],
        JointKind::Spherical => [Vector3::x(), Vector3::y(), Vector3::z()]
            .iter()
            .map(|a| rotate_about_anchor(joint, xa, xb, &UnitQuaternion::from_axis_angle(a, t)))
            .collect(),
        JointKind::Floating => (0..6)
            .map(|k| {
                let mut e = Vector3::zeros();
                e[k % 3] = t;
                if k < 3 {
                    BodyConfig::new(xb.p + e, xb.q)
                } else {
                    BodyConfig::new(xb.p, quat_mul(&xb.q, &UnitQuaternion::from_axis_angle(&e, t)).unwrap())
                }
            })
            .collect(),
    }
}

fn joint_strategy() -> impl Strategy<Value = Joint> {
    (
        prop::sample::select(vec![
            JointKind::Revolute,
            JointKind::Spherical,
            JointKind::Prismatic,
            JointKind::Fixed,
            JointKind::Floating,
        ]),
        vec3(0.5),
        vec3(0.5),
        vec3(1.0).prop_filter("axis", |a| a.norm() > 0.1),
    )
        .prop_map(|(kind, pa, ca, axis)| Joint {
            id: 0,
            kind,
            parent: Parent::Body(0),
            child: 1,
            parent_anchor: pa,
            child_anchor: ca,
            axis,
            child_axis: None,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn joint_residual_vanishes_along_free_motion(joint in joint_strategy(), xa in pose(), t in -1.5..1.5f64) {
        let xb = satisfied_child(&joint, &xa);
        prop_assert!(joint_residual(&joint, &xa, &xb).iter().all(|v| v.abs() < 1e-12));
        for moved in free_motions(&joint, &xa, &xb, t) {
            let r = joint_residual(&joint, &xa, &moved);
            prop_assert!(r.iter().all(|v| v.abs() < 1e-9), "{:?} {:?}", joint.kind, r);
        }
    }

    #[test]
    fn constraint_rows_plus_free_motions_is_six(joint in joint_strategy(), xa in pose()) {
        let xb = satisfied_child(&joint, &xa);
        let l = joint.kind.dim();
        prop_assert_eq!(l + free_motions(&joint, &xa, &xb, 0.1).len(), 6);
        if l > 0 {
            let child = joint_jacobian(&joint, &xa, &xb).columns(6, 6).into_owned();
            let sv = child.svd(false, false).singular_values;
            let rank = sv.iter().filter(|&&s| s > 1e-9 * sv.max()).count();
            prop_assert_eq!(rank, l);
        }
    }

    #[test]
    fn forest_elimination_creates_no_fill(parents in prop::collection::vec(0.0..1.0f64, 1..30)) {
        // random tree: node i+1 attaches to a uniformly chosen earlier node
        let n = parents.len() + 1;
        let edges: Vec<(usize, usize)> =
            parents.iter().enumerate().map(|(i, u)| (i + 1, (u * (i + 1) as f64) as usize)).collect();
        let (order, parent) = forest_order(n, &edges, &[0]).unwrap();
        let mut adj = vec![std::collections::BTreeSet::new(); n];
        for &(a, b) in &edges {
            adj[a].insert(b);
            adj[b].insert(a);
        }
        let mut eliminated = vec![false; n];
        for &v in &order {
            let remaining: Vec<usize> = adj[v].iter().copied().filter(|&u| !eliminated[u]).collect();
            // eliminating v only touches its parent's block
            prop_assert!(remaining.len() <= 1);
            if let Some(&u) = remaining.first() {
                prop_assert_eq!(parent[v], Some(u));
            }
            eliminated[v] = true;
        }
    }
}

#[test]
fn chain_step_matrix_fits_elimination_structure() {
    for links in 1..6 {
        let spec = ChainSpec {
            links,
            length: 0.5,
            mass: 1.0,
            radius: 0.05,
            kind: JointKind::Revolute,
            base: Some(Vector3::new(0.0, 0.0, 3.0)),
            contacts: vec![(links - 1, Vector3::new(0.0, 0.0, -0.25), 0.05)],
            friction: 0.5,
            gravity: Vector3::new(0.0, 0.0, -9.81),
            timestep: 0.01,
        };
        let mech = spec.build().unwrap();
        let z = spec.straight();
        let u = vec![Default::default(); links];
        let problem = assemble_ncp(&mech, &z, &z, &u).unwrap();
        let w = problem.initial_point(None);
        let r = ipsolver::residual_jacobian(&problem, &w);
        let structure = problem.block_structure().expect("tree mechanism has a block structure");
        assert!(structure.admits(&r), "{links} links");
        if links >= 3 {
            // coupling the first and last link directly would create fill
            let mut filled = r.clone();
            filled[(0, 3 * (links - 1))] = 1.0;
            assert!(!structure.admits(&filled));
        }
    }
}
