//! Contact residuals and assembly of the per-step NCP.
//!
//! Decision variable of a step:
//! * Euclidean: next positions `p₊` (3 per body), then joint impulses `j`.
//! * Quaternions: next orientations `q₊`, one per body.
//! * Cones, per contact. Nonlinear cone: orthant pair `(γ, s)` and SOC pair
//!   `(β, η)`. Linearized cone: orthant pairs `(γ, s)`, `(ψ, σ)`, `(β, η)` with
//!   `β, η ∈ R⁴₊`.
//!
//! Problem data θ (raw): `z₋`, `z` (p then q per body), inputs `(f, τ)` per
//! body, friction per contact, contact offsets, masses, inertias
//! `(xx, yy, zz, xy, xz, yz)` and the time step.

use nalgebra::{DMatrix, DVector, Matrix3, SVector, Vector2, Vector3, Vector4};

use crate::ad::{c, Dual, Real};
use crate::dynamics::{linear_residual_g, rotational_residual_g, BodyInput};
use crate::ipsolver::{
    BlockNode, BlockStructure, ConeLayout, NcpProblem, SolverPoint, ThetaSegment, VarLayout,
};
use crate::mech::{
    forest_order, joint_jacobian_g, joint_residual_into, tangent_pair, tangent_pair_g, BodyConfig, ConeMode,
    ContactSpec, GraphNode, Mechanism, Obstacle, Pose,
};
use crate::quat::{mul_unit, qconj_g, qmul_g, qvec_g, rotmat_g, UnitQuaternion};
use crate::{Error, Result};

/// Right-handed contact frame `{t₁, t₂, n}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceFrame {
    pub n: Vector3<f64>,
    pub t1: Vector3<f64>,
    pub t2: Vector3<f64>,
}

impl SurfaceFrame {
    pub fn from_normal(n: &Vector3<f64>) -> Self {
        let n = n.normalize();
        let (t1, t2) = tangent_pair(&n);
        Self { n, t1, t2 }
    }
}

/// Contact geometry evaluated at `(z, z₊)`.
#[derive(Clone, Copy, Debug)]
pub struct Kinematics<S: Real> {
    pub phi: S,
    pub n: Vector3<S>,
    pub t1: Vector3<S>,
    pub t2: Vector3<S>,
    /// Tangential finite-difference velocity of the contact point.
    pub v: Vector2<S>,
    /// World-frame lever arm from the body origin to the contact point at `z₊`.
    pub lever: Vector3<S>,
    /// Same for the second body of a body-pair contact.
    pub lever_other: Option<Vector3<S>>,
}

/// Second body of a pair contact: poses at `z₊` and `z`.
pub struct OtherBody<S: Real> {
    pub next: Pose<S>,
    pub curr: Pose<S>,
}

/// Contact geometry. `offset` is the contact sphere center in the body frame.
pub fn kinematics_g<S: Real>(
    spec: &ContactSpec,
    next: &Pose<S>,
    curr: &Pose<S>,
    offset: &Vector3<S>,
    other: Option<&OtherBody<S>>,
    h: S,
) -> Kinematics<S> {
    let r_next = rotmat_g(&next.q);
    let r_curr = rotmat_g(&curr.q);
    let center = next.p + r_next * offset;
    let radius = c::<S>(spec.radius);
    let sphere_normal = |d: Vector3<S>| {
        let dist = d.dot(&d).sqrt();
        (d / dist, dist)
    };
    let (n, phi, t1, t2) = match (&spec.obstacle, other) {
        (None, _) => {
            let frame = SurfaceFrame::from_normal(&spec.surface_normal);
            let n = frame.n.map(S::cst);
            let phi = n.dot(&center) - c(spec.surface_offset) - radius;
            (n, phi, frame.t1.map(S::cst), frame.t2.map(S::cst))
        }
        (Some(Obstacle::Sphere { center: oc, radius: orad }), _) => {
            let (n, dist) = sphere_normal(center - oc.map(S::cst));
            let (t1, t2) = tangent_pair_g(&n);
            (n, dist - c(*orad) - radius, t1, t2)
        }
        (Some(Obstacle::BodySphere { offset: ob, radius: rb, .. }), Some(o)) => {
            let wb = o.next.p + rotmat_g(&o.next.q) * ob.map(S::cst);
            let (n, dist) = sphere_normal(center - wb);
            let (t1, t2) = tangent_pair_g(&n);
            (n, dist - radius - c(*rb), t1, t2)
        }
        (Some(Obstacle::BodySphere { .. }), None) => panic!("body-pair contact needs the second body"),
    };

    // material point of the body that touches at z₊
    let local = offset - r_next.transpose() * n * radius;
    let lever = r_next * local;
    let mut vel = (next.p + lever - curr.p - r_curr * local) / h;
    let mut lever_other = None;
    if let (Some(Obstacle::BodySphere { offset: ob, radius: rb, .. }), Some(o)) = (&spec.obstacle, other) {
        let rn = rotmat_g(&o.next.q);
        let rc = rotmat_g(&o.curr.q);
        let local_b: Vector3<S> = ob.map(S::cst) + rn.transpose() * n * c::<S>(*rb);
        let lb = rn * local_b;
        vel -= (o.next.p + lb - o.curr.p - rc * local_b) / h;
        lever_other = Some(lb);
    }
    Kinematics {
        phi,
        n,
        t1,
        t2,
        v: Vector2::new(t1.dot(&vel), t2.dot(&vel)),
        lever,
        lever_other,
    }
}

/// Signed distance of a contact against a halfspace or static sphere.
pub fn signed_distance(spec: &ContactSpec, config: &BodyConfig) -> f64 {
    let x = Pose::<f64>::lift(config);
    kinematics_g(spec, &x, &x, &spec.offset, None, 1.0).phi
}

/// Signed distance of a body-pair contact.
pub fn signed_distance_pair(spec: &ContactSpec, a: &BodyConfig, b: &BodyConfig) -> f64 {
    let (xa, xb) = (Pose::<f64>::lift(a), Pose::<f64>::lift(b));
    let other = OtherBody { next: xb, curr: xb };
    kinematics_g(spec, &xa, &xa, &spec.offset, Some(&other), 1.0).phi
}

/// Finite-difference contact-point velocity in the tangent plane.
pub fn tangential_velocity(spec: &ContactSpec, x: &BodyConfig, x_next: &BodyConfig, h: f64) -> Vector2<f64> {
    kinematics_g(spec, &Pose::lift(x_next), &Pose::lift(x), &spec.offset, None, h).v
}

/// `(v − η₂:₃, β₁ − c_f·γ, β∘η − κe)`.
pub fn nonlinear_cone_residual(
    v: &Vector2<f64>,
    gamma: f64,
    beta: &Vector3<f64>,
    eta: &Vector3<f64>,
    cf: f64,
    kappa: f64,
) -> SVector<f64, 6> {
    let p = crate::ipsolver::soc_product(beta.as_slice(), eta.as_slice());
    SVector::<f64, 6>::from_column_slice(&[
        v[0] - eta[1],
        v[1] - eta[2],
        beta[0] - cf * gamma,
        p[0] - kappa,
        p[1],
        p[2],
    ])
}

/// `([v; −v] + ψ1 − η, ψ(c_fγ − Σβ) − κ, β∘η − κ1)`.
pub fn linearized_cone_residual(
    v: &Vector2<f64>,
    gamma: f64,
    beta: &Vector4<f64>,
    psi: f64,
    eta: &Vector4<f64>,
    cf: f64,
    kappa: f64,
) -> SVector<f64, 9> {
    let sv = Vector4::new(v[0], v[1], -v[0], -v[1]);
    let st = sv + Vector4::repeat(psi) - eta;
    let slack = cf * gamma - beta.sum();
    let comp = beta.component_mul(eta) - Vector4::repeat(kappa);
    SVector::<f64, 9>::from_iterator(
        st.iter()
            .copied()
            .chain(std::iter::once(psi * slack - kappa))
            .chain(comp.iter().copied()),
    )
}

/// Friction impulse in the tangent basis from the cone variable `b` of a contact.
pub fn friction_from_beta(mode: ConeMode, beta: &[f64]) -> Vector2<f64> {
    match mode {
        ConeMode::Nonlinear => Vector2::new(beta[1], beta[2]),
        ConeMode::Linearized => Vector2::new(beta[0] - beta[2], beta[1] - beta[3]),
    }
}

/// Index map of θ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThetaLayout {
    pub n_bodies: usize,
    pub n_contacts: usize,
}

impl ThetaLayout {
    pub fn new(mech: &Mechanism) -> Self {
        Self {
            n_bodies: mech.bodies.len(),
            n_contacts: mech.contacts.len(),
        }
    }

    pub fn z_prev(&self, i: usize) -> usize {
        7 * i
    }
    pub fn z(&self, i: usize) -> usize {
        7 * self.n_bodies + 7 * i
    }
    pub fn u(&self, i: usize) -> usize {
        14 * self.n_bodies + 6 * i
    }
    pub fn friction(&self, c: usize) -> usize {
        20 * self.n_bodies + c
    }
    pub fn offset(&self, c: usize) -> usize {
        20 * self.n_bodies + self.n_contacts + 3 * c
    }
    pub fn mass(&self, i: usize) -> usize {
        20 * self.n_bodies + 4 * self.n_contacts + i
    }
    pub fn inertia(&self, i: usize) -> usize {
        21 * self.n_bodies + 4 * self.n_contacts + 6 * i
    }
    pub fn timestep(&self) -> usize {
        27 * self.n_bodies + 4 * self.n_contacts
    }
    pub fn len(&self) -> usize {
        self.timestep() + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tangent dimension: orientations take three columns.
    pub fn tangent_len(&self) -> usize {
        self.len() - 2 * self.n_bodies
    }
    pub fn t_z_prev(&self, i: usize) -> usize {
        6 * i
    }
    pub fn t_z(&self, i: usize) -> usize {
        6 * self.n_bodies + 6 * i
    }
    pub fn t_u(&self, i: usize) -> usize {
        12 * self.n_bodies + 6 * i
    }
    /// Start of the parameter block `(c_f, offsets, m, J, h)` in tangent columns.
    pub fn t_params(&self) -> usize {
        18 * self.n_bodies
    }
    pub fn n_params(&self) -> usize {
        4 * self.n_contacts + 7 * self.n_bodies + 1
    }

    pub fn segments(&self) -> Vec<ThetaSegment> {
        let mut s = Vec::with_capacity(4 * self.n_bodies + 1);
        for _ in 0..2 * self.n_bodies {
            s.push(ThetaSegment::Euclid(3));
            s.push(ThetaSegment::Quat);
        }
        s.push(ThetaSegment::Euclid(self.len() - 14 * self.n_bodies));
        s
    }

    pub fn pack(&self, mech: &Mechanism, z_prev: &[BodyConfig], z: &[BodyConfig], u: &[BodyInput]) -> Vec<f64> {
        let mut th = vec![0.0; self.len()];
        for i in 0..self.n_bodies {
            write_config(&mut th, self.z_prev(i), &z_prev[i]);
            write_config(&mut th, self.z(i), &z[i]);
            th[self.u(i)..self.u(i) + 3].copy_from_slice(u[i].f.as_slice());
            th[self.u(i) + 3..self.u(i) + 6].copy_from_slice(u[i].tau.as_slice());
            let b = &mech.bodies[i];
            th[self.mass(i)] = b.mass;
            let j = &b.inertia;
            th[self.inertia(i)..self.inertia(i) + 6]
                .copy_from_slice(&[j[(0, 0)], j[(1, 1)], j[(2, 2)], j[(0, 1)], j[(0, 2)], j[(1, 2)]]);
        }
        for (k, ct) in mech.contacts.iter().enumerate() {
            th[self.friction(k)] = ct.friction;
            th[self.offset(k)..self.offset(k) + 3].copy_from_slice(ct.offset.as_slice());
        }
        th[self.timestep()] = mech.timestep;
        th
    }

    pub fn config(&self, theta: &[f64], at: usize) -> BodyConfig {
        BodyConfig {
            p: Vector3::new(theta[at], theta[at + 1], theta[at + 2]),
            q: UnitQuaternion {
                s: theta[at + 3],
                v: Vector3::new(theta[at + 4], theta[at + 5], theta[at + 6]),
            },
        }
    }
}

fn write_config(th: &mut [f64], at: usize, x: &BodyConfig) {
    th[at..at + 3].copy_from_slice(x.p.as_slice());
    th[at + 3..at + 7].copy_from_slice(x.q.to_vec4().as_slice());
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Seed {
    None,
    W(usize),
    Th(usize),
}

/// Raw variable and parameter vectors with at most one seeded entry.
struct Src<'a> {
    w: &'a [f64],
    th: &'a [f64],
    seed: Seed,
    scope: Option<usize>,
}

impl Src<'_> {
    fn w<S: Real>(&self, i: usize) -> S {
        S::seeded(self.w[i], self.seed == Seed::W(i))
    }
    fn t<S: Real>(&self, i: usize) -> S {
        S::seeded(self.th[i], self.seed == Seed::Th(i))
    }
    fn w3<S: Real>(&self, o: usize) -> Vector3<S> {
        Vector3::new(self.w(o), self.w(o + 1), self.w(o + 2))
    }
    fn w4<S: Real>(&self, o: usize) -> Vector4<S> {
        Vector4::new(self.w(o), self.w(o + 1), self.w(o + 2), self.w(o + 3))
    }
    fn t3<S: Real>(&self, o: usize) -> Vector3<S> {
        Vector3::new(self.t(o), self.t(o + 1), self.t(o + 2))
    }
    fn t4<S: Real>(&self, o: usize) -> Vector4<S> {
        Vector4::new(self.t(o), self.t(o + 1), self.t(o + 2), self.t(o + 3))
    }
    fn t_pose<S: Real>(&self, o: usize) -> Pose<S> {
        Pose {
            p: self.t3(o),
            q: self.t4(o + 3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Body(usize),
    Joint(usize),
    Contact(usize),
}

#[derive(Clone, Debug)]
struct BlockInfo {
    block: Block,
    row0: usize,
    nrows: usize,
    /// Dependencies, each with the contact it exclusively feeds in a body
    /// residual. Derivatives along a scoped dependency skip other contacts.
    w_deps: Vec<(usize, Option<usize>)>,
    th_deps: Vec<(usize, Option<usize>)>,
}

/// The NCP of one simulation step.
#[derive(Clone, Debug)]
pub struct StepProblem<'m> {
    mech: &'m Mechanism,
    theta: Vec<f64>,
    tl: ThetaLayout,
    layout: VarLayout,
    joint_off: Vec<usize>,
    models: Vec<Model>,
    /// Cone index of each contact's first orthant entry.
    orth_off: Vec<usize>,
    /// Cone index of each nonlinear contact's SOC block.
    soc_off: Vec<Option<usize>>,
    contact_row: Vec<usize>,
    /// `(joint, body is child)` for each body.
    body_joints: Vec<Vec<(usize, bool)>>,
    /// `(contact, body is the primary side)` for each body.
    body_contacts: Vec<Vec<(usize, bool)>>,
    blocks: Vec<BlockInfo>,
    structure: Option<BlockStructure>,
}

/// Builds the step problem for `(z₋, z, u)` using the mechanism's parameters.
pub fn assemble_ncp<'m>(
    mech: &'m Mechanism,
    z_prev: &[BodyConfig],
    z: &[BodyConfig],
    u: &[BodyInput],
) -> Result<StepProblem<'m>> {
    let n = mech.bodies.len();
    if z_prev.len() != n || z.len() != n || u.len() != n {
        return Err(Error::Dimension(format!(
            "mechanism has {n} bodies but got {} / {} / {} states and inputs",
            z_prev.len(),
            z.len(),
            u.len()
        )));
    }
    let tl = ThetaLayout::new(mech);
    StepProblem::from_theta(mech, tl.pack(mech, z_prev, z, u))
}

impl<'m> StepProblem<'m> {
    pub fn from_theta(mech: &'m Mechanism, theta: Vec<f64>) -> Result<Self> {
        let tl = ThetaLayout::new(mech);
        if theta.len() != tl.len() {
            return Err(Error::Dimension(format!("θ has {} entries, expected {}", theta.len(), tl.len())));
        }
        let n = mech.bodies.len();
        let mut joint_off = Vec::with_capacity(mech.joints.len());
        let mut nj = 0;
        for j in &mech.joints {
            joint_off.push(nj);
            nj += j.kind.dim();
        }
        let models: Vec<Model> = mech
            .contacts
            .iter()
            .enumerate()
            .map(|(k, ct)| match ct.cone_mode {
                _ if theta[tl.friction(k)] == 0.0 => Model::Frictionless,
                ConeMode::Nonlinear => Model::Nonlinear,
                ConeMode::Linearized => Model::Linearized,
            })
            .collect();
        let mut orth = 0;
        let mut orth_off = Vec::new();
        for m in &models {
            orth_off.push(orth);
            orth += match m {
                Model::Frictionless | Model::Nonlinear => 1,
                Model::Linearized => 6,
            };
        }
        let mut soc = orth;
        let mut soc_off = Vec::new();
        let mut soc_dims = Vec::new();
        for m in &models {
            if *m == Model::Nonlinear {
                soc_off.push(Some(soc));
                soc_dims.push(3);
                soc += 3;
            } else {
                soc_off.push(None);
            }
        }
        let layout = VarLayout {
            n_euclid: 3 * n + nj,
            n_quat: n,
            cones: ConeLayout::new(orth, soc_dims),
        };
        let mut contact_row = Vec::new();
        let mut row = 6 * n + nj;
        for m in &models {
            contact_row.push(row);
            row += m.dim();
        }
        let mut body_joints = vec![Vec::new(); n];
        for k in 0..mech.joints.len() {
            if mech.joints[k].kind.dim() == 0 {
                continue;
            }
            body_joints[mech.joint_child_index(k)].push((k, true));
            if let Some(p) = mech.joint_parent_index(k) {
                body_joints[p].push((k, false));
            }
        }
        let mut body_contacts = vec![Vec::new(); n];
        for k in 0..mech.contacts.len() {
            body_contacts[mech.contact_body_index(k)].push((k, true));
            if let Some(o) = mech.contact_other_index(k) {
                body_contacts[o].push((k, false));
            }
        }
        let mut p = Self {
            mech,
            theta,
            tl,
            layout,
            joint_off,
            models,
            orth_off,
            soc_off,
            contact_row,
            body_joints,
            body_contacts,
            blocks: Vec::new(),
            structure: None,
        };
        p.blocks = p.build_blocks();
        p.structure = p.build_structure();
        Ok(p)
    }

    pub fn mechanism(&self) -> &Mechanism {
        self.mech
    }

    pub fn theta_layout(&self) -> ThetaLayout {
        self.tl
    }

    pub fn timestep(&self) -> f64 {
        self.theta[self.tl.timestep()]
    }

    fn n_bodies(&self) -> usize {
        self.mech.bodies.len()
    }

    // raw w indices
    fn w_p(&self, i: usize) -> usize {
        3 * i
    }
    fn w_j(&self, k: usize) -> usize {
        3 * self.n_bodies() + self.joint_off[k]
    }
    fn w_q(&self, i: usize) -> usize {
        self.layout.n_euclid + 4 * i
    }
    fn w_b(&self, cone_idx: usize) -> usize {
        self.layout.n_euclid + 4 * self.layout.n_quat + cone_idx
    }
    fn w_c(&self, cone_idx: usize) -> usize {
        self.w_b(cone_idx) + self.layout.n_cone()
    }

    /// Cone indices of a contact, in the order `γ, (ψ), β…` for `b` and
    /// `s, (σ), η…` for `c`.
    pub fn contact_cone_indices(&self, k: usize) -> Vec<usize> {
        let o = self.orth_off[k];
        match (self.models[k], self.soc_off[k]) {
            (Model::Frictionless, _) => vec![o],
            (Model::Nonlinear, Some(s)) => vec![o, s, s + 1, s + 2],
            _ => (o..o + 6).collect(),
        }
    }

    fn body_w_deps(&self, i: usize, out: &mut Vec<usize>) {
        out.extend(self.w_p(i)..self.w_p(i) + 3);
        out.extend(self.w_q(i)..self.w_q(i) + 4);
    }

    fn body_th_deps(&self, i: usize, out: &mut Vec<usize>) {
        out.extend(self.tl.z(i)..self.tl.z(i) + 7);
    }

    fn build_blocks(&self) -> Vec<BlockInfo> {
        let m = self.mech;
        let tl = &self.tl;
        let mut blocks = Vec::new();
        for i in 0..self.n_bodies() {
            let mut w = Vec::new();
            let mut th = Vec::new();
            self.body_w_deps(i, &mut w);
            th.extend(tl.z_prev(i)..tl.z_prev(i) + 7);
            self.body_th_deps(i, &mut th);
            th.extend(tl.u(i)..tl.u(i) + 6);
            th.push(tl.mass(i));
            th.extend(tl.inertia(i)..tl.inertia(i) + 6);
            th.push(tl.timestep());
            for &(k, _) in &self.body_joints[i] {
                w.extend(self.w_j(k)..self.w_j(k) + m.joints[k].kind.dim());
                if let Some(p) = m.joint_parent_index(k) {
                    self.body_th_deps(p, &mut th);
                }
                self.body_th_deps(m.joint_child_index(k), &mut th);
            }
            let mut w: Vec<_> = w.into_iter().map(|d| (d, None)).collect();
            let mut th: Vec<_> = th.into_iter().map(|d| (d, None)).collect();
            for &(k, _) in &self.body_contacts[i] {
                let (mut wk, mut tk) = (Vec::new(), Vec::new());
                self.contact_deps(k, &mut wk, &mut tk);
                wk.extend(self.contact_cone_indices(k).into_iter().map(|idx| self.w_b(idx)));
                w.extend(wk.into_iter().map(|d| (d, Some(k))));
                th.extend(tk.into_iter().map(|d| (d, Some(k))));
            }
            blocks.push(finish_block(Block::Body(i), 6 * i, 6, w, th));
        }
        for (k, j) in m.joints.iter().enumerate() {
            let l = j.kind.dim();
            if l == 0 {
                continue;
            }
            let mut w = Vec::new();
            if let Some(p) = m.joint_parent_index(k) {
                self.body_w_deps(p, &mut w);
            }
            self.body_w_deps(m.joint_child_index(k), &mut w);
            blocks.push(finish_block(Block::Joint(k), 6 * self.n_bodies() + self.joint_off[k], l, unscoped(w), Vec::new()));
        }
        for k in 0..m.contacts.len() {
            let mut w = Vec::new();
            let mut th = if self.models[k] == Model::Frictionless { Vec::new() } else { vec![tl.friction(k)] };
            self.contact_deps(k, &mut w, &mut th);
            for idx in self.contact_cone_indices(k) {
                w.push(self.w_b(idx));
                w.push(self.w_c(idx));
            }
            blocks.push(finish_block(Block::Contact(k), self.contact_row[k], self.models[k].dim(), unscoped(w), unscoped(th)));
        }
        blocks
    }

    fn contact_deps(&self, k: usize, w: &mut Vec<usize>, th: &mut Vec<usize>) {
        let a = self.mech.contact_body_index(k);
        self.body_w_deps(a, w);
        self.body_th_deps(a, th);
        if let Some(o) = self.mech.contact_other_index(k) {
            self.body_w_deps(o, w);
            self.body_th_deps(o, th);
        }
        th.extend(self.tl.offset(k)..self.tl.offset(k) + 3);
        th.push(self.tl.timestep());
    }

    fn build_structure(&self) -> Option<BlockStructure> {
        let (nodes, edges) = self.mech.graph_edges(true);
        let roots = self.mech.preferred_roots(&nodes);
        let (order, parent) = forest_order(nodes.len(), &edges, &roots)?;
        let l = &self.layout;
        let n_eq = l.n_equality();
        let tb = l.b_tangent_offset();
        let tc = l.c_tangent_offset();
        let block_nodes = nodes
            .iter()
            .map(|node| match *node {
                GraphNode::Body(i) => {
                    let qt = l.quat_tangent_offset(i);
                    BlockNode {
                        rows: (6 * i..6 * i + 6).collect(),
                        cols: (3 * i..3 * i + 3).chain(qt..qt + 3).collect(),
                    }
                }
                GraphNode::Joint(k) => {
                    let dim = self.mech.joints[k].kind.dim();
                    let c0 = self.w_j(k);
                    let r0 = 6 * self.n_bodies() + self.joint_off[k];
                    BlockNode {
                        rows: (r0..r0 + dim).collect(),
                        cols: (c0..c0 + dim).collect(),
                    }
                }
                GraphNode::Contact(k) => {
                    let idx = self.contact_cone_indices(k);
                    let r0 = self.contact_row[k];
                    let ne = self.models[k].dim();
                    BlockNode {
                        rows: (r0..r0 + ne).chain(idx.iter().map(|&i| n_eq + i)).collect(),
                        cols: idx.iter().map(|&i| tb + i).chain(idx.iter().map(|&i| tc + i)).collect(),
                    }
                }
            })
            .collect();
        Some(BlockStructure {
            nodes: block_nodes,
            order,
            parent,
        })
    }

    fn inertia<S: Real>(&self, src: &Src, i: usize) -> Matrix3<S> {
        let o = self.tl.inertia(i);
        let (xx, yy, zz, xy, xz, yz) = (
            src.t::<S>(o),
            src.t::<S>(o + 1),
            src.t::<S>(o + 2),
            src.t::<S>(o + 3),
            src.t::<S>(o + 4),
            src.t::<S>(o + 5),
        );
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    fn next_pose<S: Real>(&self, src: &Src, i: usize) -> Pose<S> {
        Pose {
            p: src.w3(self.w_p(i)),
            q: src.w4(self.w_q(i)),
        }
    }

    fn kin<S: Real>(&self, src: &Src, k: usize) -> Kinematics<S> {
        let spec = &self.mech.contacts[k];
        let a = self.mech.contact_body_index(k);
        let other = self.mech.contact_other_index(k).map(|o| OtherBody {
            next: self.next_pose(src, o),
            curr: src.t_pose(self.tl.z(o)),
        });
        kinematics_g(
            spec,
            &self.next_pose(src, a),
            &src.t_pose(self.tl.z(a)),
            &src.t3(self.tl.offset(k)),
            other.as_ref(),
            src.t(self.tl.timestep()),
        )
    }

    /// World-frame contact impulse `nγ + t₁b₁ + t₂b₂` acting on the primary body.
    fn contact_impulse<S: Real>(&self, src: &Src, k: usize, kin: &Kinematics<S>) -> Vector3<S> {
        let idx = self.contact_cone_indices(k);
        let gamma: S = src.w(self.w_b(idx[0]));
        let (b1, b2): (S, S) = match self.models[k] {
            Model::Frictionless => (S::zero(), S::zero()),
            Model::Nonlinear => (src.w(self.w_b(idx[2])), src.w(self.w_b(idx[3]))),
            Model::Linearized => (
                src.w::<S>(self.w_b(idx[2])) - src.w(self.w_b(idx[4])),
                src.w::<S>(self.w_b(idx[3])) - src.w(self.w_b(idx[5])),
            ),
        };
        kin.n * gamma + kin.t1 * b1 + kin.t2 * b2
    }

    fn eval_block<S: Real>(&self, block: Block, src: &Src, out: &mut [S]) {
        match block {
            Block::Body(i) => self.eval_body(src, i, out),
            Block::Joint(k) => {
                let j = &self.mech.joints[k];
                let xa = match self.mech.joint_parent_index(k) {
                    Some(p) => self.next_pose(src, p),
                    None => Pose::identity(),
                };
                let xb = self.next_pose(src, self.mech.joint_child_index(k));
                joint_residual_into(j, &xa, &xb, out);
            }
            Block::Contact(k) => self.eval_contact(src, k, out),
        }
    }

    fn eval_body<S: Real>(&self, src: &Src, i: usize, out: &mut [S]) {
        let tl = &self.tl;
        let h: S = src.t(tl.timestep());
        let m: S = src.t(tl.mass(i));
        let prev = src.t_pose::<S>(tl.z_prev(i));
        let curr = src.t_pose::<S>(tl.z(i));
        let next = self.next_pose::<S>(src, i);
        let f: Vector3<S> = src.t3(tl.u(i));
        let tau: Vector3<S> = src.t3(tl.u(i) + 3);
        let quarter_h = h / c(4.0);
        let half_h = h / c(2.0);

        let mut lin = Vector3::<S>::zeros();
        let mut rot = Vector3::<S>::zeros();
        for &(k, is_child) in &self.body_joints[i] {
            let joint = &self.mech.joints[k];
            let l = joint.kind.dim();
            let xa: Pose<S> = match self.mech.joint_parent_index(k) {
                Some(p) => src.t_pose(tl.z(p)),
                None => Pose::identity(),
            };
            let xb = src.t_pose(tl.z(self.mech.joint_child_index(k)));
            let jac = joint_jacobian_g(joint, &xa, &xb);
            let col = if is_child { 6 } else { 0 };
            let j0 = self.w_j(k);
            for r in 0..l {
                let jr: S = src.w(j0 + r);
                for a in 0..3 {
                    lin[a] += jac[(r, col + a)] * jr;
                    rot[a] += jac[(r, col + 3 + a)] * jr * quarter_h;
                }
            }
        }
        let r_curr_t = rotmat_g(&curr.q).transpose();
        for &(k, primary) in &self.body_contacts[i] {
            if src.scope.is_some_and(|s| s != k) {
                continue;
            }
            let kin = self.kin::<S>(src, k);
            let mut imp = self.contact_impulse(src, k, &kin);
            let lever = if primary {
                kin.lever
            } else {
                imp = -imp;
                kin.lever_other.expect("pair contact lever")
            };
            lin += imp;
            rot += r_curr_t * lever.cross(&imp) * half_h;
        }

        let g = self.mech.gravity.map(S::cst);
        let lr = linear_residual_g(m, &prev.p, &curr.p, &next.p, &g, h, &lin, &f);
        let psi = qvec_g(&qmul_g(&qconj_g(&prev.q), &curr.q));
        let psi_next = qvec_g(&qmul_g(&qconj_g(&curr.q), &next.q));
        let rr = rotational_residual_g(&self.inertia(src, i), &psi, &psi_next, &rot, &tau, h);
        out[..3].copy_from_slice(lr.as_slice());
        out[3..6].copy_from_slice(rr.as_slice());
    }

    fn eval_contact<S: Real>(&self, src: &Src, k: usize, out: &mut [S]) {
        let kin = self.kin::<S>(src, k);
        let idx = self.contact_cone_indices(k);
        let cf: S = src.t(self.tl.friction(k));
        let b = |n: usize| src.w::<S>(self.w_b(idx[n]));
        let cv = |n: usize| src.w::<S>(self.w_c(idx[n]));
        match self.models[k] {
            Model::Frictionless => out[0] = cv(0) - kin.phi,
            Model::Nonlinear => {
                out[0] = cv(0) - kin.phi;
                out[1] = kin.v[0] - cv(2);
                out[2] = kin.v[1] - cv(3);
                out[3] = b(1) - cf * b(0);
            }
            Model::Linearized => {
                let beta_sum = b(2) + b(3) + b(4) + b(5);
                let psi = b(1);
                out[0] = cv(0) - kin.phi;
                out[1] = cv(1) - (cf * b(0) - beta_sum);
                out[2] = kin.v[0] + psi - cv(2);
                out[3] = kin.v[1] + psi - cv(3);
                out[4] = -kin.v[0] + psi - cv(4);
                out[5] = -kin.v[1] + psi - cv(5);
            }
        }
    }

    fn eval_all(&self, w_raw: &[f64]) -> DVector<f64> {
        let src = Src {
            w: w_raw,
            th: &self.theta,
            seed: Seed::None,
            scope: None,
        };
        let mut out = DVector::zeros(self.layout.n_equality());
        for b in &self.blocks {
            self.eval_block::<f64>(b.block, &src, &mut out.as_mut_slice()[b.row0..b.row0 + b.nrows]);
        }
        out
    }

    fn jacobian(&self, w_raw: &[f64], wrt_theta: bool) -> DMatrix<f64> {
        let ncols = if wrt_theta { self.theta.len() } else { self.layout.n_raw() };
        let mut jac = DMatrix::zeros(self.layout.n_equality(), ncols);
        let mut buf = vec![Dual::default(); 6];
        for b in &self.blocks {
            buf.resize(b.nrows.max(buf.len()), Dual::default());
            let deps = if wrt_theta { &b.th_deps } else { &b.w_deps };
            for &(d, scope) in deps {
                let src = Src {
                    w: w_raw,
                    th: &self.theta,
                    seed: if wrt_theta { Seed::Th(d) } else { Seed::W(d) },
                    scope,
                };
                self.eval_block::<Dual>(b.block, &src, &mut buf[..b.nrows]);
                for r in 0..b.nrows {
                    jac[(b.row0 + r, d)] = buf[r].du;
                }
            }
        }
        jac
    }

    /// Warm-startable initial point: constant-velocity extrapolation of the
    /// configuration, previous impulses and cone variables if given, and slacks
    /// set to the predicted signed distance.
    pub fn initial_point(&self, warm: Option<&SolverPoint>) -> SolverPoint {
        let n = self.n_bodies();
        let mut w = SolverPoint::zeros(&self.layout);
        for i in 0..n {
            let prev = self.tl.config(&self.theta, self.tl.z_prev(i));
            let curr = self.tl.config(&self.theta, self.tl.z(i));
            let p = curr.p * 2.0 - prev.p;
            w.euclid.rows_mut(3 * i, 3).copy_from(&p);
            w.quats[i] = mul_unit(&curr.q, &mul_unit(&prev.q.conj(), &curr.q));
        }
        if let Some(ws) = warm.filter(|ws| ws.b.len() == w.b.len() && ws.euclid.len() == w.euclid.len()) {
            let nj = self.layout.n_euclid - 3 * n;
            w.euclid.rows_mut(3 * n, nj).copy_from(&ws.euclid.rows(3 * n, nj));
            w.b.copy_from(&ws.b);
            w.c.copy_from(&ws.c);
        }
        let raw = w.raw();
        let src = Src {
            w: raw.as_slice(),
            th: &self.theta,
            seed: Seed::None,
            scope: None,
        };
        for k in 0..self.mech.contacts.len() {
            let phi = self.kin::<f64>(&src, k).phi;
            let idx = self.contact_cone_indices(k)[0];
            w.c[idx] = phi;
        }
        w
    }

    /// Next configurations `z₊` stored in `w`.
    pub fn next_configs(&self, w: &SolverPoint) -> Vec<BodyConfig> {
        (0..self.n_bodies())
            .map(|i| BodyConfig {
                p: Vector3::new(w.euclid[3 * i], w.euclid[3 * i + 1], w.euclid[3 * i + 2]),
                q: w.quats[i],
            })
            .collect()
    }

    /// Joint impulses stored in `w`.
    pub fn joint_impulses(&self, w: &SolverPoint) -> DVector<f64> {
        let n = 3 * self.n_bodies();
        w.euclid.rows(n, self.layout.n_euclid - n).into_owned()
    }

    /// Contact state at `w`: signed distance at `z₊`, impulses and slip velocity.
    pub fn contact_state(&self, w: &SolverPoint, k: usize) -> ContactState {
        let raw = w.raw();
        let src = Src {
            w: raw.as_slice(),
            th: &self.theta,
            seed: Seed::None,
            scope: None,
        };
        let kin = self.kin::<f64>(&src, k);
        let idx = self.contact_cone_indices(k);
        let beta: Vec<f64> = idx[1..].iter().map(|&i| w.b[i]).collect();
        let friction = match self.models[k] {
            Model::Frictionless => Vector2::zeros(),
            Model::Nonlinear => friction_from_beta(ConeMode::Nonlinear, &beta),
            Model::Linearized => friction_from_beta(ConeMode::Linearized, &beta[1..]),
        };
        ContactState {
            gamma: w.b[idx[0]],
            friction,
            phi: kin.phi,
            slip: kin.v,
            normal: kin.n,
            t1: kin.t1,
            t2: kin.t2,
        }
    }
}

/// Contact model of one step. Frictionless contacts carry only the normal
/// pair: with `c_f = 0` the friction cone has an empty interior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Model {
    Frictionless,
    Nonlinear,
    Linearized,
}

impl Model {
    fn dim(self) -> usize {
        match self {
            Model::Frictionless => 1,
            Model::Nonlinear => 4,
            Model::Linearized => 6,
        }
    }
}

fn unscoped(deps: Vec<usize>) -> Vec<(usize, Option<usize>)> {
    deps.into_iter().map(|d| (d, None)).collect()
}

/// Sorted unique dependencies; one reached through several scopes is unscoped.
fn merge_deps(mut deps: Vec<(usize, Option<usize>)>) -> Vec<(usize, Option<usize>)> {
    deps.sort_unstable_by_key(|&(d, _)| d);
    let mut out: Vec<(usize, Option<usize>)> = Vec::with_capacity(deps.len());
    for (d, scope) in deps {
        match out.last_mut() {
            Some(last) if last.0 == d => {
                if last.1 != scope {
                    last.1 = None;
                }
            }
            _ => out.push((d, scope)),
        }
    }
    out
}

fn finish_block(
    block: Block,
    row0: usize,
    nrows: usize,
    w: Vec<(usize, Option<usize>)>,
    th: Vec<(usize, Option<usize>)>,
) -> BlockInfo {
    BlockInfo {
        block,
        row0,
        nrows,
        w_deps: merge_deps(w),
        th_deps: merge_deps(th),
    }
}

/// Per-contact quantities of a solved step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactState {
    pub gamma: f64,
    /// Friction impulse in `(t₁, t₂)` coordinates.
    pub friction: Vector2<f64>,
    pub phi: f64,
    /// Tangential contact-point velocity over the step.
    pub slip: Vector2<f64>,
    pub normal: Vector3<f64>,
    pub t1: Vector3<f64>,
    pub t2: Vector3<f64>,
}

impl NcpProblem for StepProblem<'_> {
    fn layout(&self) -> &VarLayout {
        &self.layout
    }

    fn equality(&self, w: &SolverPoint) -> DVector<f64> {
        self.eval_all(w.raw().as_slice())
    }

    fn equality_jacobian(&self, w: &SolverPoint) -> DMatrix<f64> {
        self.jacobian(w.raw().as_slice(), false)
    }

    fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn theta_segments(&self) -> Vec<ThetaSegment> {
        self.tl.segments()
    }

    fn data_jacobian(&self, w: &SolverPoint) -> DMatrix<f64> {
        self.jacobian(w.raw().as_slice(), true)
    }

    fn block_structure(&self) -> Option<&BlockStructure> {
        self.structure.as_ref()
    }
}
