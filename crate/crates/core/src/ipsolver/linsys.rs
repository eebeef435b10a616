//! Linear solves for the Newton systems.
//!
//! Tree-structured problems are factored block by block in elimination order
//! (leaves first): `Dₚ ← Dₚ − Aₚᵢ Dᵢ⁻¹ Aᵢₚ`. Anything else, or a near-zero
//! pivot, falls back to a dense column-pivoted QR.

use nalgebra::{DMatrix, DVector, ColPivQR, LU, Dyn};

/// Pivots below this magnitude abandon the block factorization.
pub const PIVOT_TOL: f64 = 1e-12;

/// Rows and columns of one graph node in the full system.
#[derive(Clone, Debug, Default)]
pub struct BlockNode {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct BlockStructure {
    pub nodes: Vec<BlockNode>,
    /// Children before parents.
    pub order: Vec<usize>,
    pub parent: Vec<Option<usize>>,
}

impl BlockStructure {
    /// Checks that every nonzero of `a` lies on a node's diagonal block or on
    /// a parent/child coupling, so elimination creates no fill.
    pub fn admits(&self, a: &DMatrix<f64>) -> bool {
        let n = a.nrows();
        if a.ncols() != n {
            return false;
        }
        let mut row_node = vec![usize::MAX; n];
        let mut col_node = vec![usize::MAX; n];
        for (k, node) in self.nodes.iter().enumerate() {
            if node.rows.len() != node.cols.len() {
                return false;
            }
            for &r in &node.rows {
                row_node[r] = k;
            }
            for &c in &node.cols {
                col_node[c] = k;
            }
        }
        if row_node.contains(&usize::MAX) || col_node.contains(&usize::MAX) {
            return false;
        }
        for j in 0..n {
            let cj = col_node[j];
            for i in 0..n {
                if a[(i, j)] != 0.0 {
                    let ri = row_node[i];
                    if ri != cj && self.parent[ri] != Some(cj) && self.parent[cj] != Some(ri) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Singular;

struct NodeFactor {
    lu: LU<f64, Dyn, Dyn>,
    /// `Dᵢ⁻¹ Aᵢₚ`
    x: Option<DMatrix<f64>>,
    /// `Aₚᵢ`
    l: Option<DMatrix<f64>>,
}

pub struct BlockLdu {
    structure: BlockStructure,
    factors: Vec<Option<NodeFactor>>,
    n: usize,
}

pub enum Factorization {
    Block(BlockLdu),
    Dense(ColPivQR<f64, Dyn, Dyn>),
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Factorization::Block(b) => write!(f, "Block({} nodes)", b.structure.nodes.len()),
            Factorization::Dense(_) => write!(f, "Dense"),
        }
    }
}

fn gather(a: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
}

fn min_pivot(lu: &LU<f64, Dyn, Dyn>) -> f64 {
    let u = lu.u();
    (0..u.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min)
}

impl BlockLdu {
    pub fn new(a: &DMatrix<f64>, structure: &BlockStructure) -> Option<Self> {
        let nn = structure.nodes.len();
        let mut diag: Vec<DMatrix<f64>> = structure
            .nodes
            .iter()
            .map(|nd| gather(a, &nd.rows, &nd.cols))
            .collect();
        let mut factors: Vec<Option<NodeFactor>> = (0..nn).map(|_| None).collect();
        for &i in &structure.order {
            let d = std::mem::replace(&mut diag[i], DMatrix::zeros(0, 0));
            let lu = d.lu();
            if min_pivot(&lu) < PIVOT_TOL {
                return None;
            }
            let (x, l) = match structure.parent[i] {
                Some(p) => {
                    let ni = &structure.nodes[i];
                    let np = &structure.nodes[p];
                    let aip = gather(a, &ni.rows, &np.cols);
                    let api = gather(a, &np.rows, &ni.cols);
                    let x = lu.solve(&aip)?;
                    diag[p] -= &api * &x;
                    (Some(x), Some(api))
                }
                None => (None, None),
            };
            factors[i] = Some(NodeFactor { lu, x, l });
        }
        Some(Self {
            structure: structure.clone(),
            factors,
            n: a.nrows(),
        })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let s = &self.structure;
        let mut y: Vec<DVector<f64>> = s
            .nodes
            .iter()
            .map(|nd| DVector::from_iterator(nd.rows.len(), nd.rows.iter().map(|&r| b[r])))
            .collect();
        let mut z: Vec<DVector<f64>> = vec![DVector::zeros(0); s.nodes.len()];
        for &i in &s.order {
            let f = self.factors[i].as_ref().expect("factored");
            z[i] = f.lu.solve(&y[i]).expect("nonsingular pivot block");
            if let (Some(p), Some(l)) = (s.parent[i], &f.l) {
                y[p] -= l * &z[i];
            }
        }
        let mut x: Vec<DVector<f64>> = vec![DVector::zeros(0); s.nodes.len()];
        for &i in s.order.iter().rev() {
            let f = self.factors[i].as_ref().expect("factored");
            let mut xi = z[i].clone();
            if let (Some(p), Some(xm)) = (s.parent[i], &f.x) {
                xi -= xm * &x[p];
            }
            x[i] = xi;
        }
        let mut out = DVector::zeros(self.n);
        for (nd, xi) in s.nodes.iter().zip(&x) {
            for (k, &c) in nd.cols.iter().enumerate() {
                out[c] = xi[k];
            }
        }
        out
    }
}

/// Factors `a`, using the block path when `structure` fits its sparsity.
pub fn factorize(a: &DMatrix<f64>, structure: Option<&BlockStructure>) -> Result<Factorization, Singular> {
    if let Some(s) = structure {
        if s.admits(a) {
            if let Some(f) = BlockLdu::new(a, s) {
                return Ok(Factorization::Block(f));
            }
        }
    }
    dense(a)
}

pub fn dense(a: &DMatrix<f64>) -> Result<Factorization, Singular> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Singular);
    }
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let n = r.nrows().min(r.ncols());
    if n > 0 {
        let big = r[(0, 0)].abs();
        let small = (0..n).map(|i| r[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if !(small > 1e-18 * big.max(1e-300)) {
            return Err(Singular);
        }
    }
    Ok(Factorization::Dense(qr))
}

impl Factorization {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            Factorization::Block(f) => f.solve(b),
            Factorization::Dense(qr) => qr.solve(b).expect("checked nonsingular"),
        }
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Factorization::Dense(qr) => qr.solve(b).expect("checked nonsingular"),
            Factorization::Block(_) => {
                let mut out = DMatrix::zeros(b.nrows(), b.ncols());
                for j in 0..b.ncols() {
                    out.set_column(j, &self.solve(&b.column(j).into_owned()));
                }
                out
            }
        }
    }

    pub fn is_block(&self) -> bool {
        matches!(self, Factorization::Block(_))
    }
}
