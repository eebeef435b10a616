//! Primal-dual interior-point method for cone-constrained NCPs.
//!
//! The decision variable is `w = (a, b, c)`: `a` holds Euclidean entries and
//! unit quaternions, `b` and `c` live in the same product cone. The residual is
//! `r(w; θ, κ) = [E(w; θ); b ∘ c − κe]`. Newton directions are computed in the
//! tangent space (three coordinates per quaternion) and quaternions are
//! updated multiplicatively.

pub mod cones;
pub mod linsys;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::quat::{attitude_jacobian, phi_map, mul_unit, UnitQuaternion};
use crate::{Error, Result};
pub use cones::{
    alpha_orthant, alpha_soc, arrow, centering, cone_product, cone_search, kappa_violation, soc_product,
    ConeLayout,
};
pub use linsys::{factorize, BlockNode, BlockStructure, Factorization};

/// Shape of the decision variable.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct VarLayout {
    pub n_euclid: usize,
    pub n_quat: usize,
    pub cones: ConeLayout,
}

impl VarLayout {
    pub fn n_cone(&self) -> usize {
        self.cones.dim()
    }

    /// Coordinates with quaternions stored as 4-vectors.
    pub fn n_raw(&self) -> usize {
        self.n_euclid + 4 * self.n_quat + 2 * self.n_cone()
    }

    /// Coordinates with quaternions as 3-dimensional tangent directions.
    pub fn n_tangent(&self) -> usize {
        self.n_euclid + 3 * self.n_quat + 2 * self.n_cone()
    }

    /// Equality rows required for a square system.
    pub fn n_equality(&self) -> usize {
        self.n_euclid + 3 * self.n_quat + self.n_cone()
    }

    pub fn quat_tangent_offset(&self, i: usize) -> usize {
        self.n_euclid + 3 * i
    }

    pub fn b_tangent_offset(&self) -> usize {
        self.n_euclid + 3 * self.n_quat
    }

    pub fn c_tangent_offset(&self) -> usize {
        self.b_tangent_offset() + self.n_cone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverPoint {
    pub euclid: DVector<f64>,
    pub quats: Vec<UnitQuaternion>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
}

impl SolverPoint {
    pub fn zeros(layout: &VarLayout) -> Self {
        Self {
            euclid: DVector::zeros(layout.n_euclid),
            quats: vec![UnitQuaternion::identity(); layout.n_quat],
            b: layout.cones.identity(),
            c: layout.cones.identity(),
        }
    }

    /// Raw coordinates `(euclid, quats as 4-vectors, b, c)`.
    pub fn raw(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.euclid.len() + 4 * self.quats.len() + 2 * self.b.len());
        v.extend(self.euclid.iter());
        for q in &self.quats {
            v.extend(q.to_vec4().iter());
        }
        v.extend(self.b.iter());
        v.extend(self.c.iter());
        DVector::from_vec(v)
    }

    fn check(&self, layout: &VarLayout) -> Result<()> {
        if self.euclid.len() != layout.n_euclid
            || self.quats.len() != layout.n_quat
            || self.b.len() != layout.n_cone()
            || self.c.len() != layout.n_cone()
        {
            return Err(Error::Dimension("solver point does not match the problem layout".into()));
        }
        if self.euclid.iter().chain(self.b.iter()).chain(self.c.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite initial point".into()));
        }
        Ok(())
    }
}

/// Part of the raw parameter vector θ, used to build `H_D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaSegment {
    Euclid(usize),
    Quat,
}

pub fn theta_tangent_dim(segments: &[ThetaSegment]) -> usize {
    segments
        .iter()
        .map(|s| match s {
            ThetaSegment::Euclid(n) => *n,
            ThetaSegment::Quat => 3,
        })
        .sum()
}

/// A cone-constrained nonlinear complementarity problem.
pub trait NcpProblem {
    fn layout(&self) -> &VarLayout;

    /// Equality rows `E(w; θ)`.
    fn equality(&self, w: &SolverPoint) -> DVector<f64>;

    /// `∂E/∂w` with respect to the raw coordinates of `w`.
    fn equality_jacobian(&self, w: &SolverPoint) -> DMatrix<f64>;

    /// Raw problem data θ.
    fn theta(&self) -> &[f64] {
        &[]
    }

    fn theta_segments(&self) -> Vec<ThetaSegment> {
        vec![ThetaSegment::Euclid(self.theta().len())]
    }

    /// `∂E/∂θ` with respect to raw θ.
    fn data_jacobian(&self, _w: &SolverPoint) -> DMatrix<f64> {
        DMatrix::zeros(self.layout().n_equality(), self.theta().len())
    }

    /// Sparsity structure for the block factorization, if the problem has one.
    fn block_structure(&self) -> Option<&BlockStructure> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub r_tol: f64,
    pub kappa_tol: f64,
    pub tau_soc_max: f64,
    pub tau_min: f64,
    pub beta_ls: f64,
    pub max_iterations: usize,
    pub max_linesearch: usize,
    /// Interior margin of the initial projection.
    pub margin: f64,
    /// Cache the first iterate whose complementarity drops below this value.
    pub kappa_grad: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            r_tol: 1e-5,
            kappa_tol: 1e-5,
            tau_soc_max: 0.99,
            tau_min: 0.95,
            beta_ls: 0.5,
            max_iterations: 100,
            max_linesearch: 25,
            margin: 0.1,
            kappa_grad: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_tol > 0.0 && self.kappa_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.beta_ls > 0.0 && self.beta_ls < 1.0) {
            return Err(Error::InvalidArgument("beta_ls must lie in (0, 1)".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument("margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    LinesearchFail,
    Singular,
}

/// One accepted iterate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub r_vio: f64,
    pub kappa_vio: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub linesearch_steps: usize,
    pub interior: bool,
}

#[derive(Debug)]
pub struct SolveResult {
    pub w: SolverPoint,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Central-path target used in the last iteration.
    pub kappa_final: f64,
    pub r_vio: f64,
    pub kappa_vio: f64,
    /// First iterate with `κ_vio < kappa_grad`, when requested.
    pub kappa_cache: Option<SolverPoint>,
    pub trace: Vec<IterRecord>,
}

impl SolveResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn to_error(&self) -> Error {
        Error::Solver {
            status: self.status,
            iterations: self.iterations,
            r_vio: self.r_vio,
            kappa_vio: self.kappa_vio,
        }
    }
}

/// Full residual `[E(w); b∘c − κe]`.
pub fn residual<P: NcpProblem + ?Sized>(problem: &P, w: &SolverPoint, kappa: f64) -> DVector<f64> {
    let layout = problem.layout();
    let e = problem.equality(w);
    let mut comp = cone_product(&layout.cones, &w.b, &w.c);
    if kappa != 0.0 {
        comp -= layout.cones.identity() * kappa;
    }
    let mut r = DVector::zeros(e.len() + comp.len());
    r.rows_mut(0, e.len()).copy_from(&e);
    r.rows_mut(e.len(), comp.len()).copy_from(&comp);
    r
}

/// `(r_vio, κ_vio)`: equality infinity norm and worst cone product.
pub fn violations<P: NcpProblem + ?Sized>(problem: &P, w: &SolverPoint) -> (f64, f64) {
    let e = problem.equality(w);
    let r = if e.is_empty() { 0.0 } else { e.amax() };
    let r = if r.is_nan() { f64::INFINITY } else { r };
    (r, kappa_violation(&problem.layout().cones, &w.b, &w.c))
}

/// Tangent-space Jacobians `(R̄, D̄) = (R·H_R, D·H_D)`.
pub fn build_jacobians<P: NcpProblem + ?Sized>(problem: &P, w: &SolverPoint) -> (DMatrix<f64>, DMatrix<f64>) {
    (residual_jacobian(problem, w), data_jacobian(problem, w))
}

pub fn residual_jacobian<P: NcpProblem + ?Sized>(problem: &P, w: &SolverPoint) -> DMatrix<f64> {
    let layout = problem.layout();
    let n = layout.n_tangent();
    let n_eq = layout.n_equality();
    let nc = layout.n_cone();
    let raw = problem.equality_jacobian(w);
    assert_eq!(raw.shape(), (n_eq, layout.n_raw()), "equality Jacobian shape");
    let mut jac = DMatrix::zeros(n, n);
    let ne = layout.n_euclid;
    jac.view_mut((0, 0), (n_eq, ne)).copy_from(&raw.view((0, 0), (n_eq, ne)));
    for (i, q) in w.quats.iter().enumerate() {
        let g = attitude_jacobian(q);
        let block = raw.view((0, ne + 4 * i), (n_eq, 4)) * g;
        jac.view_mut((0, layout.quat_tangent_offset(i)), (n_eq, 3)).copy_from(&block);
    }
    let raw_b = ne + 4 * layout.n_quat;
    let tb = layout.b_tangent_offset();
    jac.view_mut((0, tb), (n_eq, 2 * nc)).copy_from(&raw.view((0, raw_b), (n_eq, 2 * nc)));
    jac.view_mut((n_eq, tb), (nc, nc)).copy_from(&arrow(&layout.cones, &w.c));
    jac.view_mut((n_eq, tb + nc), (nc, nc)).copy_from(&arrow(&layout.cones, &w.b));
    jac
}

pub fn data_jacobian<P: NcpProblem + ?Sized>(problem: &P, w: &SolverPoint) -> DMatrix<f64> {
    let layout = problem.layout();
    let segments = problem.theta_segments();
    let theta = problem.theta();
    let raw = problem.data_jacobian(w);
    let n_eq = layout.n_equality();
    let mut out = DMatrix::zeros(layout.n_tangent(), theta_tangent_dim(&segments));
    let (mut rc, mut tc) = (0, 0);
    for seg in segments {
        match seg {
            ThetaSegment::Euclid(k) => {
                out.view_mut((0, tc), (n_eq, k)).copy_from(&raw.view((0, rc), (n_eq, k)));
                rc += k;
                tc += k;
            }
            ThetaSegment::Quat => {
                let q = UnitQuaternion {
                    s: theta[rc],
                    v: Vector3::new(theta[rc + 1], theta[rc + 2], theta[rc + 3]),
                };
                let block = raw.view((0, rc), (n_eq, 4)) * attitude_jacobian(&q);
                out.view_mut((0, tc), (n_eq, 3)).copy_from(&block);
                rc += 4;
                tc += 3;
            }
        }
    }
    out
}

/// Euclidean entries move linearly, quaternions by `q ⊗ φ(αΔ)`.
pub fn candidate_update(layout: &VarLayout, w: &SolverPoint, delta: &DVector<f64>, alpha: f64) -> Result<SolverPoint> {
    let ne = layout.n_euclid;
    let nc = layout.n_cone();
    let mut out = w.clone();
    out.euclid += delta.rows(0, ne) * alpha;
    for (i, q) in out.quats.iter_mut().enumerate() {
        let o = layout.quat_tangent_offset(i);
        let d = Vector3::new(delta[o], delta[o + 1], delta[o + 2]) * alpha;
        *q = mul_unit(q, &phi_map(&d)?);
    }
    out.b += delta.rows(layout.b_tangent_offset(), nc) * alpha;
    out.c += delta.rows(layout.c_tangent_offset(), nc) * alpha;
    Ok(out)
}

fn split_cone(layout: &VarLayout, delta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let nc = layout.n_cone();
    (
        delta.rows(layout.b_tangent_offset(), nc).into_owned(),
        delta.rows(layout.c_tangent_offset(), nc).into_owned(),
    )
}

/// Algorithm: predictor-corrector with analytic cone line search.
pub fn solve<P: NcpProblem + ?Sized>(problem: &P, w0: &SolverPoint, opts: &SolverOptions) -> Result<SolveResult> {
    opts.validate()?;
    let layout = problem.layout();
    w0.check(layout)?;
    if problem.equality(w0).len() != layout.n_equality() {
        return Err(Error::Dimension(format!(
            "problem has {} equality rows, layout needs {}",
            problem.equality(w0).len(),
            layout.n_equality()
        )));
    }
    let cones = &layout.cones;
    let mut w = w0.clone();
    cones.project_interior(&mut w.b, opts.margin);
    cones.project_interior(&mut w.c, opts.margin);

    let (mut r_vio, mut k_vio) = violations(problem, &w);
    let mut cache = None;
    let note_cache = |w: &SolverPoint, k_vio: f64, cache: &mut Option<SolverPoint>| {
        if let Some(kg) = opts.kappa_grad {
            if cache.is_none() && k_vio < kg {
                *cache = Some(w.clone());
            }
        }
    };
    note_cache(&w, k_vio, &mut cache);
    let mut trace = Vec::new();
    let mut kappa = 0.0;
    let finish = |w, status, iterations, kappa, r_vio, k_vio, cache, trace| SolveResult {
        w,
        status,
        iterations,
        kappa_final: kappa,
        r_vio,
        kappa_vio: k_vio,
        kappa_cache: cache,
        trace,
    };

    for iter in 0..opts.max_iterations {
        if r_vio < opts.r_tol && k_vio < opts.kappa_tol {
            return Ok(finish(w, SolveStatus::Converged, iter, kappa, r_vio, k_vio, cache, trace));
        }
        let jac = residual_jacobian(problem, &w);
        let fact = match factorize(&jac, problem.block_structure()) {
            Ok(f) => f,
            Err(_) => return Ok(finish(w, SolveStatus::Singular, iter, kappa, r_vio, k_vio, cache, trace)),
        };

        // predictor
        let r_aff = residual(problem, &w, 0.0);
        let d_aff = -fact.solve(&r_aff);
        let (db, dc) = split_cone(layout, &d_aff);
        let alpha_aff = cone_search(cones, &w.b, &w.c, &db, &dc, 1.0, 1.0);
        let (mu, sigma) = centering(cones, &w.b, &w.c, alpha_aff, &db, &dc);
        kappa = (sigma * mu).max(opts.kappa_tol / 5.0);

        // corrector
        let r_k = residual(problem, &w, kappa);
        let delta = -fact.solve(&r_k);
        if delta.iter().any(|v| !v.is_finite()) {
            return Ok(finish(w, SolveStatus::Singular, iter, kappa, r_vio, k_vio, cache, trace));
        }
        let tau_ort = opts.tau_min.max(1.0 - r_vio.max(k_vio).powi(2));
        let tau_soc = opts.tau_soc_max.min(tau_ort);
        let (db, dc) = split_cone(layout, &delta);
        let mut alpha = cone_search(cones, &w.b, &w.c, &db, &dc, tau_ort, tau_soc);

        let mut accepted = None;
        for ls in 1..=opts.max_linesearch {
            if let Ok(cand) = candidate_update(layout, &w, &delta, alpha) {
                let (rv, kv) = violations(problem, &cand);
                // once complementarity is within tolerance (always, without
                // cones) only a lower residual counts as progress
                let k_progress = kv <= k_vio && k_vio >= opts.kappa_tol;
                if rv.is_finite() && (rv <= r_vio || k_progress) {
                    accepted = Some((cand, rv, kv, ls));
                    break;
                }
            }
            alpha *= opts.beta_ls;
        }
        let Some((cand, rv, kv, ls)) = accepted else {
            return Ok(finish(w, SolveStatus::LinesearchFail, iter + 1, kappa, r_vio, k_vio, cache, trace));
        };
        w = cand;
        r_vio = rv;
        k_vio = kv;
        trace.push(IterRecord {
            r_vio,
            kappa_vio: k_vio,
            kappa,
            alpha,
            linesearch_steps: ls,
            interior: cones.is_interior(&w.b) && cones.is_interior(&w.c),
        });
        note_cache(&w, k_vio, &mut cache);
    }
    let status = if r_vio < opts.r_tol && k_vio < opts.kappa_tol {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIter
    };
    Ok(finish(w, status, opts.max_iterations, kappa, r_vio, k_vio, cache, trace))
}

/// Options for Newton's method on the relaxed system `r(w; θ, κ) = 0`.
#[derive(Clone, Debug)]
pub struct CentralOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub fraction_to_boundary: f64,
}

impl Default for CentralOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iterations: 60,
            fraction_to_boundary: 0.99,
        }
    }
}

/// Point on the central path at fixed `κ`, with the residual norm reached.
#[derive(Debug, Clone)]
pub struct CentralPoint {
    pub w: SolverPoint,
    pub residual: f64,
    pub iterations: usize,
}

/// Solves `r(w; θ, κ) = 0` for a fixed `κ > 0` starting from an interior `w0`,
/// keeping the cone variables strictly interior.
pub fn solve_central<P: NcpProblem + ?Sized>(
    problem: &P,
    w0: &SolverPoint,
    kappa: f64,
    opts: &CentralOptions,
) -> Result<CentralPoint> {
    let layout = problem.layout();
    w0.check(layout)?;
    let cones = &layout.cones;
    if !(cones.is_interior(&w0.b) && cones.is_interior(&w0.c)) {
        return Err(Error::InvalidArgument("central-path solve needs an interior start".into()));
    }
    let mut w = w0.clone();
    let mut r = residual(problem, &w, kappa);
    let mut norm = r.amax();
    let fail = |norm: f64, iterations: usize| Error::Solver {
        status: SolveStatus::LinesearchFail,
        iterations,
        r_vio: norm,
        kappa_vio: kappa,
    };
    for it in 0..opts.max_iterations {
        if norm < opts.tol {
            return Ok(CentralPoint { w, residual: norm, iterations: it });
        }
        let jac = residual_jacobian(problem, &w);
        let fact = factorize(&jac, problem.block_structure()).map_err(|_| Error::Solver {
            status: SolveStatus::Singular,
            iterations: it,
            r_vio: norm,
            kappa_vio: kappa,
        })?;
        let delta = -fact.solve(&r);
        let (db, dc) = split_cone(layout, &delta);
        let t = opts.fraction_to_boundary;
        let mut alpha = cone_search(cones, &w.b, &w.c, &db, &dc, t, t);
        let mut next = None;
        for _ in 0..40 {
            if let Ok(cand) = candidate_update(layout, &w, &delta, alpha) {
                let rc = residual(problem, &cand, kappa);
                let nc = rc.amax();
                if nc.is_finite() && nc < (1.0 - 1e-4 * alpha) * norm {
                    next = Some((cand, rc, nc));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match next {
            Some((cand, rc, nc)) => {
                w = cand;
                r = rc;
                norm = nc;
            }
            // Stalled at roundoff level: accept what we have.
            None if norm < opts.tol * 1e3 => return Ok(CentralPoint { w, residual: norm, iterations: it }),
            None => return Err(fail(norm, it)),
        }
    }
    if norm < opts.tol * 1e3 {
        Ok(CentralPoint {
            w,
            residual: norm,
            iterations: opts.max_iterations,
        })
    } else {
        Err(fail(norm, opts.max_iterations))
    }
}

/// `∂w/∂θ = −R̄⁻¹D̄` at `w`, in tangent coordinates.
pub fn sensitivity<P: NcpProblem + ?Sized>(problem: &P, w: &SolverPoint) -> Result<DMatrix<f64>> {
    let (rbar, dbar) = build_jacobians(problem, w);
    let fact = factorize(&rbar, problem.block_structure()).map_err(|_| Error::Solver {
        status: SolveStatus::Singular,
        iterations: 0,
        r_vio: f64::NAN,
        kappa_vio: f64::NAN,
    })?;
    Ok(-fact.solve_matrix(&dbar))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// minimize ½x² s.t. x ≥ 1, as an NCP:
    /// w = (x; λ; s), equalities x − λ = 0, x − 1 − s = 0, pair (s, λ).
    struct ToyQp {
        layout: VarLayout,
    }

    impl ToyQp {
        fn new() -> Self {
            Self {
                layout: VarLayout {
                    n_euclid: 1,
                    n_quat: 0,
                    cones: ConeLayout::new(1, vec![]),
                },
            }
        }
    }

    impl NcpProblem for ToyQp {
        fn layout(&self) -> &VarLayout {
            &self.layout
        }
        fn equality(&self, w: &SolverPoint) -> DVector<f64> {
            let (x, lam, s) = (w.euclid[0], w.c[0], w.b[0]);
            DVector::from_column_slice(&[x - lam, x - 1.0 - s])
        }
        fn equality_jacobian(&self, _w: &SolverPoint) -> DMatrix<f64> {
            // columns: x, s (b), λ (c)
            DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 1.0, -1.0, 0.0])
        }
    }

    #[test]
    fn toy_qp_converges_to_kkt_point() {
        let p = ToyQp::new();
        let w0 = SolverPoint::zeros(&p.layout);
        let res = solve(&p, &w0, &SolverOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        assert!((res.w.euclid[0] - 1.0).abs() < 1e-4);
        assert!((res.w.c[0] - 1.0).abs() < 1e-4);
        assert!(res.trace.iter().all(|t| t.interior));
    }

    #[test]
    fn zero_step_leaves_point_unchanged() {
        let layout = VarLayout {
            n_euclid: 2,
            n_quat: 1,
            cones: ConeLayout::new(1, vec![3]),
        };
        let w = SolverPoint::zeros(&layout);
        let d = DVector::from_element(layout.n_tangent(), 0.3);
        assert_eq!(candidate_update(&layout, &w, &d, 0.0).unwrap(), w);
        let moved = candidate_update(&layout, &w, &d, 1.0).unwrap();
        assert!((moved.quats[0].norm() - 1.0).abs() < 1e-12);
        assert!((moved.euclid[0] - 0.3).abs() < 1e-15);
        let big = DVector::from_element(layout.n_tangent(), 2.0);
        assert!(matches!(candidate_update(&layout, &w, &big, 1.0), Err(Error::Domain(_))));
    }

    /// r(q) = V·q − target with a single quaternion.
    struct QuatToy {
        layout: VarLayout,
    }

    impl NcpProblem for QuatToy {
        fn layout(&self) -> &VarLayout {
            &self.layout
        }
        fn equality(&self, w: &SolverPoint) -> DVector<f64> {
            DVector::from_column_slice(w.quats[0].v.as_slice())
        }
        fn equality_jacobian(&self, _w: &SolverPoint) -> DMatrix<f64> {
            let v = crate::quat::vmat();
            DMatrix::from_fn(3, 4, |i, j| v[(i, j)])
        }
    }

    #[test]
    fn quaternion_columns_use_attitude_jacobian() {
        let p = QuatToy {
            layout: VarLayout {
                n_euclid: 0,
                n_quat: 1,
                cones: ConeLayout::default(),
            },
        };
        let q = UnitQuaternion::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.8);
        let w = SolverPoint {
            euclid: DVector::zeros(0),
            quats: vec![q],
            b: DVector::zeros(0),
            c: DVector::zeros(0),
        };
        let (rbar, dbar) = build_jacobians(&p, &w);
        let expected = crate::quat::vmat() * attitude_jacobian(&q);
        assert!((rbar.clone() - DMatrix::from_fn(3, 3, |i, j| expected[(i, j)])).amax() < 1e-15);
        assert_eq!(rbar.rank(1e-10), 3);
        assert_eq!(dbar.ncols(), 0);
        let res = solve(&p, &w, &SolverOptions::default()).unwrap();
        assert!(res.converged());
        assert!(res.w.quats[0].v.norm() < 1e-5);
    }
}
