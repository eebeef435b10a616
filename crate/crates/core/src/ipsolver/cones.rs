//! Cone algebra: products, step lengths and centering for `Rⁿ₊ × Q₁ × … × Qₘ`.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

/// Layout of a cone variable: an orthant block followed by second-order cones.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConeLayout {
    pub orthant_dim: usize,
    pub soc_dims: Vec<usize>,
}

impl ConeLayout {
    pub fn new(orthant_dim: usize, soc_dims: Vec<usize>) -> Self {
        assert!(soc_dims.iter().all(|&l| l >= 2), "second-order cones need dimension >= 2");
        Self { orthant_dim, soc_dims }
    }

    pub fn dim(&self) -> usize {
        self.orthant_dim + self.soc_dims.iter().sum::<usize>()
    }

    pub fn degree(&self) -> usize {
        self.orthant_dim + self.soc_dims.len()
    }

    /// `(offset, len)` of each second-order cone block.
    pub fn soc_blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut off = self.orthant_dim;
        self.soc_dims.iter().map(move |&l| {
            let r = (off, l);
            off += l;
            r
        })
    }

    /// Identity element `e`.
    pub fn identity(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.dim());
        e.rows_mut(0, self.orthant_dim).fill(1.0);
        for (off, _) in self.soc_blocks() {
            e[off] = 1.0;
        }
        e
    }

    pub fn is_interior(&self, y: &DVector<f64>) -> bool {
        y.rows(0, self.orthant_dim).iter().all(|&v| v > 0.0)
            && self.soc_blocks().all(|(o, l)| soc_margin(y.rows(o, l)) > 0.0)
    }

    /// Moves `y` into the interior with the given margin.
    pub fn project_interior(&self, y: &mut DVector<f64>, margin: f64) {
        for v in y.rows_mut(0, self.orthant_dim).iter_mut() {
            *v = v.max(margin);
        }
        for (o, l) in self.soc_blocks() {
            let tail = y.rows(o + 1, l - 1).norm();
            y[o] = y[o].max(tail + margin);
        }
    }
}

/// `y₁ − ‖y₂:ₗ‖`, positive in the interior.
pub fn soc_margin(y: DVectorView<f64>) -> f64 {
    y[0] - y.rows(1, y.len() - 1).norm()
}

/// Second-order-cone product `(bᵀc, b₁c₂:ₗ + c₁b₂:ₗ)`.
pub fn soc_product(b: &[f64], c: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(b.len());
    out.push(b.iter().zip(c).map(|(x, y)| x * y).sum());
    out.extend((1..b.len()).map(|i| b[0] * c[i] + c[0] * b[i]));
    out
}

/// Blockwise cone product `b ∘ c`.
pub fn cone_product(layout: &ConeLayout, b: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
    let mut out = b.component_mul(c);
    for (o, l) in layout.soc_blocks() {
        let p = soc_product(&b.as_slice()[o..o + l], &c.as_slice()[o..o + l]);
        out.rows_mut(o, l).copy_from_slice(&p);
    }
    out
}

/// Matrix of `c ↦ b ∘ c` (diagonal on the orthant, arrow matrix on each SOC).
pub fn arrow(layout: &ConeLayout, b: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(b.len(), b.len());
    for i in 0..layout.orthant_dim {
        m[(i, i)] = b[i];
    }
    for (o, l) in layout.soc_blocks() {
        for i in 0..l {
            m[(o, o + i)] = b[o + i];
            m[(o + i, o)] = b[o + i];
            m[(o + i, o + i)] = b[o];
        }
    }
    m
}

/// `max_i ‖b⁽ⁱ⁾ ∘ c⁽ⁱ⁾‖_∞`.
pub fn kappa_violation(layout: &ConeLayout, b: &DVector<f64>, c: &DVector<f64>) -> f64 {
    if b.is_empty() {
        return 0.0;
    }
    cone_product(layout, b, c).amax()
}

/// Largest `α ≤ 1` keeping `y + αΔ` in the closed orthant.
pub fn alpha_orthant(y: &[f64], delta: &[f64]) -> f64 {
    let mut alpha = 1.0f64;
    for (&yi, &di) in y.iter().zip(delta) {
        if di < 0.0 {
            alpha = alpha.min(-yi / di);
        }
    }
    alpha
}

/// Largest `α ≤ 1` keeping `y + αΔ` in the closed second-order cone.
pub fn alpha_soc(y: &[f64], delta: &[f64]) -> f64 {
    let (y1, yb) = (y[0], &y[1..]);
    let (d1, db) = (delta[0], &delta[1..]);
    let nu = y1 * y1 - yb.iter().map(|v| v * v).sum::<f64>();
    let zeta = y1 * d1 - yb.iter().zip(db).map(|(a, b)| a * b).sum::<f64>();
    let sq = nu.sqrt();
    let rho1 = zeta / nu;
    let coef = (zeta / sq + d1) / (y1 * sq + nu);
    let rho_norm = db
        .iter()
        .zip(yb)
        .map(|(d, yv)| {
            let r = d / sq - coef * yv;
            r * r
        })
        .sum::<f64>()
        .sqrt();
    if rho_norm > rho1 {
        (1.0 / (rho_norm - rho1)).min(1.0)
    } else {
        1.0
    }
}

/// Step length over all cone blocks of `b` and `c`. `τ` is a
/// fraction-to-boundary factor: each block allows `min(1, τ·α_max)`.
pub fn cone_search(
    layout: &ConeLayout,
    b: &DVector<f64>,
    c: &DVector<f64>,
    db: &DVector<f64>,
    dc: &DVector<f64>,
    tau_ort: f64,
    tau_soc: f64,
) -> f64 {
    let n = layout.orthant_dim;
    let mut alpha = 1.0f64;
    for (y, d) in [(b, db), (c, dc)] {
        let a = alpha_orthant(&y.as_slice()[..n], &d.as_slice()[..n]);
        if a < 1.0 {
            alpha = alpha.min(tau_ort * a);
        }
        for (o, l) in layout.soc_blocks() {
            let a = alpha_soc(&y.as_slice()[o..o + l], &d.as_slice()[o..o + l]);
            if a < 1.0 {
                alpha = alpha.min(tau_soc * a);
            }
        }
    }
    alpha
}

/// Centering `(μ, σ)` from the affine step.
pub fn centering(
    layout: &ConeLayout,
    b: &DVector<f64>,
    c: &DVector<f64>,
    alpha_aff: f64,
    db: &DVector<f64>,
    dc: &DVector<f64>,
) -> (f64, f64) {
    let deg = layout.degree();
    if deg == 0 {
        return (0.0, 0.0);
    }
    let mu = b.dot(c) / deg as f64;
    if mu == 0.0 {
        return (0.0, 0.0);
    }
    let mu_aff = (b + db * alpha_aff).dot(&(c + dc * alpha_aff)) / deg as f64;
    let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
    (mu, sigma)
}
