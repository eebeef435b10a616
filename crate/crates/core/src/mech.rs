//! Mechanism description: bodies, joints, contacts and their graph.

use std::collections::HashMap;

use nalgebra::{Matrix3, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::ad::{c, Real};
use crate::quat::{qconj_g, qmul_g, qvec_g, rotmat_g, skew_g, UnitQuaternion};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub id: usize,
    pub mass: f64,
    #[serde(with = "mat3_rows")]
    pub inertia: Matrix3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyConfig {
    pub p: Vector3<f64>,
    pub q: UnitQuaternion,
}

impl BodyConfig {
    pub fn new(p: Vector3<f64>, q: UnitQuaternion) -> Self {
        Self { p, q }
    }

    pub fn at(p: Vector3<f64>) -> Self {
        Self {
            p,
            q: UnitQuaternion::identity(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Spherical,
    Prismatic,
    Fixed,
    Floating,
}

impl JointKind {
    /// Number of constraint equations.
    pub fn dim(self) -> usize {
        match self {
            JointKind::Revolute | JointKind::Prismatic => 5,
            JointKind::Spherical => 3,
            JointKind::Fixed => 6,
            JointKind::Floating => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parent {
    World,
    Body(usize),
}

impl Serialize for Parent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Parent::World => s.serialize_str("world"),
            Parent::Body(id) => s.serialize_u64(*id as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Parent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(id) => Ok(Parent::Body(id)),
            Raw::Name(n) if n == "world" => Ok(Parent::World),
            Raw::Name(n) => Err(serde::de::Error::custom(format!("unknown joint parent {n:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub id: usize,
    pub kind: JointKind,
    pub parent: Parent,
    pub child: usize,
    #[serde(default = "Vector3::zeros")]
    pub parent_anchor: Vector3<f64>,
    #[serde(default = "Vector3::zeros")]
    pub child_anchor: Vector3<f64>,
    #[serde(default = "Vector3::z")]
    pub axis: Vector3<f64>,
    /// Revolute only: hinge axis in the child frame. Defaults to `axis`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child_axis: Option<Vector3<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConeMode {
    #[default]
    Nonlinear,
    Linearized,
}

/// Alternative contact geometry. Without one, the contact is against the
/// halfspace `surface_normal·x ≥ surface_offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    /// Static sphere in the world.
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Sphere attached to another body.
    BodySphere {
        body: usize,
        offset: Vector3<f64>,
        radius: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactSpec {
    pub id: usize,
    pub body: usize,
    #[serde(default = "Vector3::zeros")]
    pub offset: Vector3<f64>,
    #[serde(default)]
    pub radius: f64,
    pub friction: f64,
    #[serde(default = "Vector3::z")]
    pub surface_normal: Vector3<f64>,
    #[serde(default)]
    pub surface_offset: f64,
    #[serde(default)]
    pub cone_mode: ConeMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obstacle: Option<Obstacle>,
}

impl ContactSpec {
    /// Point or sphere contact against the floor `z = 0`.
    pub fn floor(id: usize, body: usize, offset: Vector3<f64>, radius: f64, friction: f64) -> Self {
        Self {
            id,
            body,
            offset,
            radius,
            friction,
            surface_normal: Vector3::z(),
            surface_offset: 0.0,
            cone_mode: ConeMode::Nonlinear,
            obstacle: None,
        }
    }

    /// Size of the cone variable `b` (equal to that of `c`). Frictionless
    /// contacts keep only the normal impulse.
    pub fn cone_dim(&self) -> usize {
        if self.friction == 0.0 {
            return 1;
        }
        match self.cone_mode {
            ConeMode::Nonlinear => 4,
            ConeMode::Linearized => 6,
        }
    }

    /// Number of equality rows contributed to the step problem.
    pub fn equality_dim(&self) -> usize {
        self.cone_dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraphNode {
    Body(usize),
    Joint(usize),
    Contact(usize),
}

/// Serialized mechanism description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MechanismDesc {
    pub bodies: Vec<Body>,
    #[serde(default)]
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub contacts: Vec<ContactSpec>,
    #[serde(default = "default_gravity")]
    pub gravity: Vector3<f64>,
    pub timestep: f64,
}

fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

#[derive(Clone, Debug)]
pub struct Mechanism {
    pub bodies: Vec<Body>,
    pub joints: Vec<Joint>,
    pub contacts: Vec<ContactSpec>,
    pub gravity: Vector3<f64>,
    pub timestep: f64,
    /// Graph nodes, children before parents; a plain listing when `is_tree` is false.
    pub elimination_order: Vec<GraphNode>,
    pub is_tree: bool,
    joint_parent: Vec<Option<usize>>,
    joint_child: Vec<usize>,
    contact_body: Vec<usize>,
    contact_other: Vec<Option<usize>>,
}

pub fn build_mechanism(
    bodies: Vec<Body>,
    joints: Vec<Joint>,
    contacts: Vec<ContactSpec>,
    gravity: Vector3<f64>,
    timestep: f64,
) -> Result<Mechanism> {
    if !(timestep > 0.0) {
        return Err(Error::Mechanism(format!("timestep must be positive, got {timestep}")));
    }
    let mut body_idx = HashMap::new();
    for (i, b) in bodies.iter().enumerate() {
        if body_idx.insert(b.id, i).is_some() {
            return Err(Error::Mechanism(format!("duplicate body id {}", b.id)));
        }
        validate_body(b)?;
    }
    let lookup = |id: usize, what: &str| {
        body_idx
            .get(&id)
            .copied()
            .ok_or_else(|| Error::Mechanism(format!("{what} references missing body {id}")))
    };

    let mut seen = HashMap::new();
    let mut joint_parent = Vec::with_capacity(joints.len());
    let mut joint_child = Vec::with_capacity(joints.len());
    for j in &joints {
        if seen.insert(j.id, ()).is_some() {
            return Err(Error::Mechanism(format!("duplicate joint id {}", j.id)));
        }
        let what = format!("joint {}", j.id);
        joint_parent.push(match j.parent {
            Parent::World => None,
            Parent::Body(id) => Some(lookup(id, &what)?),
        });
        let child = lookup(j.child, &what)?;
        if joint_parent.last() == Some(&Some(child)) {
            return Err(Error::Mechanism(format!("joint {} connects body {} to itself", j.id, j.child)));
        }
        joint_child.push(child);
        if matches!(j.kind, JointKind::Revolute | JointKind::Prismatic) && j.axis.norm() < 1e-12 {
            return Err(Error::Mechanism(format!("joint {} has a zero axis", j.id)));
        }
    }

    let mut seen = HashMap::new();
    let mut contact_body = Vec::with_capacity(contacts.len());
    let mut contact_other = Vec::with_capacity(contacts.len());
    for ct in &contacts {
        if seen.insert(ct.id, ()).is_some() {
            return Err(Error::Mechanism(format!("duplicate contact id {}", ct.id)));
        }
        let what = format!("contact {}", ct.id);
        contact_body.push(lookup(ct.body, &what)?);
        if (ct.surface_normal.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Mechanism(format!("{what}: surface normal is not unit")));
        }
        if !(ct.friction >= 0.0) || !(ct.radius >= 0.0) {
            return Err(Error::Mechanism(format!("{what}: friction and radius must be non-negative")));
        }
        contact_other.push(match &ct.obstacle {
            Some(Obstacle::BodySphere { body, .. }) => {
                let o = lookup(*body, &what)?;
                if o == *contact_body.last().unwrap() {
                    return Err(Error::Mechanism(format!("{what}: body contacts itself")));
                }
                Some(o)
            }
            _ => None,
        });
    }

    let mut mech = Mechanism {
        bodies,
        joints,
        contacts,
        gravity,
        timestep,
        elimination_order: Vec::new(),
        is_tree: false,
        joint_parent,
        joint_child,
        contact_body,
        contact_other,
    };
    let (order, tree) = mech.graph_order(false);
    mech.elimination_order = order;
    mech.is_tree = tree;
    Ok(mech)
}

fn validate_body(b: &Body) -> Result<()> {
    if !(b.mass > 0.0) {
        return Err(Error::Mechanism(format!("body {} mass must be positive", b.id)));
    }
    let j = &b.inertia;
    if (j - j.transpose()).amax() > 1e-12 {
        return Err(Error::Mechanism(format!("body {} inertia is not symmetric", b.id)));
    }
    if j.symmetric_eigenvalues().min() <= 0.0 {
        return Err(Error::Mechanism(format!("body {} inertia is not positive definite", b.id)));
    }
    Ok(())
}

impl Mechanism {
    pub fn from_desc(desc: MechanismDesc) -> Result<Self> {
        build_mechanism(desc.bodies, desc.joints, desc.contacts, desc.gravity, desc.timestep)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let desc: MechanismDesc =
            serde_json::from_str(text).map_err(|e| Error::Mechanism(format!("bad mechanism JSON: {e}")))?;
        Self::from_desc(desc)
    }

    pub fn to_desc(&self) -> MechanismDesc {
        MechanismDesc {
            bodies: self.bodies.clone(),
            joints: self.joints.clone(),
            contacts: self.contacts.clone(),
            gravity: self.gravity,
            timestep: self.timestep,
        }
    }

    pub fn num_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn joint_parent_index(&self, k: usize) -> Option<usize> {
        self.joint_parent[k]
    }

    pub fn joint_child_index(&self, k: usize) -> usize {
        self.joint_child[k]
    }

    pub fn contact_body_index(&self, c: usize) -> usize {
        self.contact_body[c]
    }

    /// Second body of a body-pair contact.
    pub fn contact_other_index(&self, c: usize) -> Option<usize> {
        self.contact_other[c]
    }

    pub fn joint_dims(&self) -> usize {
        self.joints.iter().map(|j| j.kind.dim()).sum()
    }

    /// Same mechanism with a different time step.
    pub fn with_timestep(&self, h: f64) -> Result<Self> {
        let mut d = self.to_desc();
        d.timestep = h;
        Self::from_desc(d)
    }

    /// Graph edges between nodes. With `skip_empty`, zero-dimensional joints are
    /// dropped, which is what the linear system sees.
    pub fn graph_edges(&self, skip_empty: bool) -> (Vec<GraphNode>, Vec<(usize, usize)>) {
        let mut nodes: Vec<GraphNode> = (0..self.bodies.len()).map(GraphNode::Body).collect();
        let mut edges = Vec::new();
        for (k, j) in self.joints.iter().enumerate() {
            if skip_empty && j.kind.dim() == 0 {
                continue;
            }
            let n = nodes.len();
            nodes.push(GraphNode::Joint(k));
            edges.push((n, self.joint_child[k]));
            if let Some(p) = self.joint_parent[k] {
                edges.push((n, p));
            }
        }
        for c in 0..self.contacts.len() {
            let n = nodes.len();
            nodes.push(GraphNode::Contact(c));
            edges.push((n, self.contact_body[c]));
            if let Some(o) = self.contact_other[c] {
                edges.push((n, o));
            }
        }
        (nodes, edges)
    }

    /// Leaves-to-root order over the graph, plus whether it is a forest.
    pub fn graph_order(&self, skip_empty: bool) -> (Vec<GraphNode>, bool) {
        let (nodes, edges) = self.graph_edges(skip_empty);
        let roots = self.preferred_roots(&nodes);
        match forest_order(nodes.len(), &edges, &roots) {
            Some((order, _)) => (order.into_iter().map(|i| nodes[i]).collect(), true),
            None => (nodes, false),
        }
    }

    /// World-attached joints make good roots: their diagonal block is zero and
    /// only becomes invertible after the child subtree has been eliminated.
    pub fn preferred_roots(&self, nodes: &[GraphNode]) -> Vec<usize> {
        let mut roots: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, GraphNode::Joint(k) if self.joint_parent[*k].is_none()))
            .map(|(i, _)| i)
            .collect();
        roots.extend(
            nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| matches!(n, GraphNode::Body(_)))
                .map(|(i, _)| i),
        );
        roots
    }
}

/// Post-order traversal of a forest. Each component is rooted at the first
/// entry of `roots` that it contains (or its lowest node). Returns the order
/// (children first) and the parent of every node, or `None` if there is a cycle.
pub fn forest_order(
    n: usize,
    edges: &[(usize, usize)],
    roots: &[usize],
) -> Option<(Vec<usize>, Vec<Option<usize>>)> {
    let mut uf: Vec<usize> = (0..n).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        if ra == rb {
            return None;
        }
        uf[ra] = rb;
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut parent = vec![None; n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let candidates = roots.iter().copied().chain(0..n);
    for r in candidates {
        if visited[r] {
            continue;
        }
        // Iterative DFS emitting nodes after their children.
        let mut stack = vec![(r, 0usize)];
        visited[r] = true;
        while let Some((node, next)) = stack.pop() {
            if next < adj[node].len() {
                stack.push((node, next + 1));
                let nb = adj[node][next];
                if !visited[nb] {
                    visited[nb] = true;
                    parent[nb] = Some(node);
                    stack.push((nb, 0));
                }
            } else {
                order.push(node);
            }
        }
    }
    Some((order, parent))
}

/// Deterministic orthonormal pair spanning the plane normal to `n`:
/// Gram-Schmidt on x̂ (ŷ when `|n·x̂| > 0.9`), second vector `n × t₁`.
pub fn tangent_pair(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    tangent_pair_g(n)
}

pub fn tangent_pair_g<S: Real>(n: &Vector3<S>) -> (Vector3<S>, Vector3<S>) {
    let seed = if n[0].value().abs() > 0.9 {
        Vector3::new(S::zero(), S::one(), S::zero())
    } else {
        Vector3::new(S::one(), S::zero(), S::zero())
    };
    let t = seed - n * n.dot(&seed);
    let t1 = t / t.dot(&t).sqrt();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// Position and raw quaternion, generic over the scalar.
#[derive(Clone, Copy, Debug)]
pub struct Pose<S: Real> {
    pub p: Vector3<S>,
    pub q: Vector4<S>,
}

impl<S: Real> Pose<S> {
    pub fn identity() -> Self {
        Self {
            p: Vector3::zeros(),
            q: Vector4::new(S::one(), S::zero(), S::zero(), S::zero()),
        }
    }

    pub fn lift(x: &BodyConfig) -> Self {
        Self {
            p: x.p.map(S::cst),
            q: crate::quat::lift_quat(&x.q),
        }
    }
}

/// Joint Jacobian block, `l × 12` with columns `(p_a, δ_a, p_b, δ_b)`; rows past `l` are zero.
pub type JointJac<S> = SMatrix<S, 6, 12>;

struct JointFrame<S: Real> {
    ra: nalgebra::Matrix3<S>,
    rb: nalgebra::Matrix3<S>,
    ca: Vector3<S>,
    cb: Vector3<S>,
    d: Vector3<S>,
}

fn frame<S: Real>(joint: &Joint, xa: &Pose<S>, xb: &Pose<S>) -> JointFrame<S> {
    let ra = rotmat_g(&xa.q);
    let rb = rotmat_g(&xb.q);
    let ca = joint.parent_anchor.map(S::cst);
    let cb = joint.child_anchor.map(S::cst);
    let d = xb.p + rb * cb - xa.p - ra * ca;
    JointFrame { ra, rb, ca, cb, d }
}

fn joint_axes(joint: &Joint) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let a = joint.axis.normalize();
    let (u1, u2) = tangent_pair(&a);
    let ac = joint.child_axis.map(|v| v.normalize()).unwrap_or(a);
    (u1, u2, ac)
}

/// Constraint residual `k(x_a, x_b)`, written into the first `l` entries of `out`.
/// A world parent is passed as the identity pose.
pub fn joint_residual_into<S: Real>(joint: &Joint, xa: &Pose<S>, xb: &Pose<S>, out: &mut [S]) {
    if joint.kind == JointKind::Floating {
        return;
    }
    let f = frame(joint, xa, xb);
    let rel = || qvec_g(&qmul_g(&qconj_g(&xa.q), &xb.q));
    match joint.kind {
        JointKind::Spherical => out[..3].copy_from_slice(f.d.as_slice()),
        JointKind::Revolute => {
            let (u1, u2, ac) = joint_axes(joint);
            let axis_b = f.rb * ac.map(S::cst);
            out[..3].copy_from_slice(f.d.as_slice());
            out[3] = (f.ra * u1.map(S::cst)).dot(&axis_b);
            out[4] = (f.ra * u2.map(S::cst)).dot(&axis_b);
        }
        JointKind::Prismatic => {
            let (u1, u2, _) = joint_axes(joint);
            let r = rel();
            out[..3].copy_from_slice(r.as_slice());
            let dl = f.ra.transpose() * f.d;
            out[3] = u1.map(S::cst).dot(&dl);
            out[4] = u2.map(S::cst).dot(&dl);
        }
        JointKind::Fixed => {
            out[..3].copy_from_slice(f.d.as_slice());
            out[3..6].copy_from_slice(rel().as_slice());
        }
        JointKind::Floating => unreachable!(),
    }
}

pub fn joint_residual(joint: &Joint, xa: &BodyConfig, xb: &BodyConfig) -> Vec<f64> {
    let mut out = [0.0; 6];
    joint_residual_into(joint, &Pose::lift(xa), &Pose::lift(xb), &mut out);
    out[..joint.kind.dim()].to_vec()
}

/// Tangent-space Jacobian of [`joint_residual_into`], in closed form so it can
/// itself be differentiated with dual numbers.
pub fn joint_jacobian_g<S: Real>(joint: &Joint, xa: &Pose<S>, xb: &Pose<S>) -> JointJac<S> {
    let mut jac = JointJac::<S>::zeros();
    if joint.kind == JointKind::Floating {
        return jac;
    }
    let f = frame(joint, xa, xb);
    let two = c::<S>(2.0);
    let eye = nalgebra::Matrix3::<S>::identity();
    let anchor_da = f.ra * skew_g(&f.ca) * two;
    let anchor_db = -(f.rb * skew_g(&f.cb) * two);
    let put = |jac: &mut JointJac<S>, row: usize, col: usize, m: &nalgebra::Matrix3<S>| {
        jac.fixed_view_mut::<3, 3>(row, col).copy_from(m);
    };
    let anchor = |jac: &mut JointJac<S>| {
        put(jac, 0, 0, &(-eye));
        put(jac, 0, 3, &anchor_da);
        put(jac, 0, 6, &eye);
        put(jac, 0, 9, &anchor_db);
    };
    let relative = |jac: &mut JointJac<S>, row: usize| {
        let r = qmul_g(&qconj_g(&xa.q), &xb.q);
        let (s, v) = (r[0], qvec_g(&r));
        put(jac, row, 3, &(-(eye * s - skew_g(&v))));
        put(jac, row, 9, &(eye * s + skew_g(&v)));
    };
    match joint.kind {
        JointKind::Spherical => anchor(&mut jac),
        JointKind::Revolute => {
            anchor(&mut jac);
            let (u1, u2, ac) = joint_axes(joint);
            let ac_s = ac.map(S::cst);
            let axis_b = f.rb * ac_s;
            for (row, u) in [(3, u1), (4, u2)] {
                let us = u.map(S::cst);
                let da = (f.ra * skew_g(&us) * (-two)).transpose() * axis_b;
                let db = (f.rb * skew_g(&ac_s) * (-two)).transpose() * (f.ra * us);
                jac.fixed_view_mut::<1, 3>(row, 3).copy_from(&da.transpose());
                jac.fixed_view_mut::<1, 3>(row, 9).copy_from(&db.transpose());
            }
        }
        JointKind::Prismatic => {
            relative(&mut jac, 0);
            let (u1, u2, _) = joint_axes(joint);
            let dl = f.ra.transpose() * f.d;
            let da_rot = (skew_g(&dl) + skew_g(&f.ca)) * two;
            for (row, u) in [(3, u1), (4, u2)] {
                let us = u.map(S::cst);
                let w = f.ra * us; // u_iᵀR_aᵀ as a column
                jac.fixed_view_mut::<1, 3>(row, 0).copy_from(&(-w).transpose());
                jac.fixed_view_mut::<1, 3>(row, 3).copy_from(&(da_rot.transpose() * us).transpose());
                jac.fixed_view_mut::<1, 3>(row, 6).copy_from(&w.transpose());
                jac.fixed_view_mut::<1, 3>(row, 9).copy_from(&(anchor_db.transpose() * w).transpose());
            }
        }
        JointKind::Fixed => {
            anchor(&mut jac);
            relative(&mut jac, 3);
        }
        JointKind::Floating => unreachable!(),
    }
    jac
}

pub fn joint_jacobian(joint: &Joint, xa: &BodyConfig, xb: &BodyConfig) -> nalgebra::DMatrix<f64> {
    let jac = joint_jacobian_g(joint, &Pose::lift(xa), &Pose::lift(xb));
    let l = joint.kind.dim();
    nalgebra::DMatrix::from_fn(l, 12, |i, j| jac[(i, j)])
}

mod mat3_rows {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]));
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        let rows = <[[f64; 3]; 3]>::deserialize(d)?;
        Ok(Matrix3::from_fn(|i, j| rows[i][j]))
    }
}
