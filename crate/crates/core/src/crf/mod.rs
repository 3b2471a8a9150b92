//! Continuous CRF over superpixels: a Gaussian MRF whose unary terms come from
//! a CNN and whose pairwise weights mix K similarity kernels.
//!
//! With `w_ij = Σ_k β_k S^k_ij` summed once per undirected edge,
//!
//! ```text
//! E(y)  = −Σ_i (y_i − h_i)² − Σ_(i,j) w_ij (y_i − y_j)²  = −yᵀAy + 2hᵀy − hᵀh
//! A     = I + L(w)
//! y*    = A⁻¹h
//! log Z = (g/2)·log π − ½·log|A| + hᵀA⁻¹h − hᵀh
//! ```

mod generator;
mod ops;
mod segment;

use nalgebra::{DMatrix, DVector};

pub use generator::{CrfForward, CrfGenerator, CrfGeneratorSpec};
pub use ops::{crf_map_var, crf_nll_var, CrfStructure};
pub use segment::{
    boundary_recall, compute_similarity, segment_superpixels, SegmentMethod, Segmentation,
    DEFAULT_SIGMA, HISTOGRAM_BINS,
};

use crate::error::{Error, Result};

/// Number of pairwise similarity kernels (mean intensity, intensity histogram).
pub const K: usize = 2;

/// Everything the CRF math needs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelGraph {
    /// Unordered, deduplicated node pairs with `i < j`.
    pub edges: Vec<(usize, usize)>,
    /// `S^k_ij` per edge, each in `(0, 1]`.
    pub similarity: Vec<[f64; K]>,
    /// Unary depth per node.
    pub h: Vec<f64>,
    pub beta: [f64; K],
}

impl SuperpixelGraph {
    pub fn new(edges: Vec<(usize, usize)>, similarity: Vec<[f64; K]>, h: Vec<f64>, beta: [f64; K]) -> Result<Self> {
        let g = Self { edges, similarity, h, beta };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> usize {
        self.h.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges.len() != self.similarity.len() {
            return Err(Error::Dimension {
                op: "superpixel_graph",
                axis: "edge",
                expected: self.edges.len(),
                actual: self.similarity.len(),
            });
        }
        let n = self.nodes();
        if let Some(&(i, j)) = self.edges.iter().find(|&&(i, j)| i >= j || j >= n) {
            return Err(Error::invalid(format!("edge ({i}, {j}) must satisfy i < j < {n}")));
        }
        if self.similarity.iter().flatten().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::invalid("similarities must lie in (0, 1]"));
        }
        if self.beta.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::invalid(format!("beta {:?} must be nonnegative", self.beta)));
        }
        Ok(())
    }

    /// Combined edge weights `w_ij = Σ_k β_k S^k_ij`.
    pub fn weights(&self) -> Vec<f64> {
        self.similarity
            .iter()
            .map(|s| s.iter().zip(&self.beta).map(|(s, b)| s * b).sum())
            .collect()
    }

    /// `A = I + L` as a dense matrix.
    pub fn precision(&self) -> DMatrix<f64> {
        let n = self.nodes();
        let mut a = DMatrix::identity(n, n);
        add_laplacian(&mut a, &self.edges, &self.weights());
        a
    }

    fn expect_len(&self, y: &[f64], op: &'static str) -> Result<()> {
        if y.len() != self.nodes() {
            return Err(Error::Dimension { op, axis: "node", expected: self.nodes(), actual: y.len() });
        }
        Ok(())
    }
}

fn add_laplacian(a: &mut DMatrix<f64>, edges: &[(usize, usize)], w: &[f64]) {
    for (&(i, j), &w) in edges.iter().zip(w) {
        a[(i, i)] += w;
        a[(j, j)] += w;
        a[(i, j)] -= w;
        a[(j, i)] -= w;
    }
}

/// `Σ_(i,j) w_ij (y_i − y_j)²`, i.e. `yᵀL(w)y`.
fn laplacian_form(edges: &[(usize, usize)], w: impl Iterator<Item = f64>, y: &[f64]) -> f64 {
    edges.iter().zip(w).map(|(&(i, j), w)| w * (y[i] - y[j]).powi(2)).sum()
}

/// Cholesky factor of a precision matrix, with the diagnostics the CRF needs.
pub(crate) struct Factor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Factor {
    pub(crate) fn new(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        match a.clone().cholesky() {
            Some(chol) => Ok(Self { chol }),
            None => Err(Error::NotPositiveDefinite {
                n,
                min_eigenvalue: a.symmetric_eigenvalues().min(),
            }),
        }
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(b)).as_slice().to_vec()
    }

    pub(crate) fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub(crate) fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// `E(y)`; higher is more probable.
pub fn crf_energy(graph: &SuperpixelGraph, y: &[f64]) -> Result<f64> {
    graph.expect_len(y, "crf_energy")?;
    let unary: f64 = y.iter().zip(&graph.h).map(|(y, h)| (y - h).powi(2)).sum();
    Ok(-unary - laplacian_form(&graph.edges, graph.weights().into_iter(), y))
}

/// Most probable labelling `y* = A⁻¹h`.
pub fn crf_map(graph: &SuperpixelGraph) -> Result<Vec<f64>> {
    graph.validate()?;
    Ok(Factor::new(graph.precision())?.solve(&graph.h))
}

/// `log Z` and the factor it was computed with.
fn log_partition(graph: &SuperpixelGraph) -> Result<(f64, Factor, Vec<f64>)> {
    graph.validate()?;
    let f = Factor::new(graph.precision())?;
    let m = f.solve(&graph.h);
    let n = graph.nodes() as f64;
    let h_m: f64 = graph.h.iter().zip(&m).map(|(h, m)| h * m).sum();
    let h_h: f64 = graph.h.iter().map(|h| h * h).sum();
    let log_z = 0.5 * n * std::f64::consts::PI.ln() - 0.5 * f.log_det() + h_m - h_h;
    Ok((log_z, f, m))
}

/// Per-image negative log-likelihood `−E(y) + log Z`, without regularisers.
pub fn crf_nll(graph: &SuperpixelGraph, y_true: &[f64]) -> Result<f64> {
    let e = crf_energy(graph, y_true)?;
    Ok(-e + log_partition(graph)?.0)
}

/// `(∂NLL/∂h, ∂NLL/∂β)`.
pub fn crf_nll_gradients(graph: &SuperpixelGraph, y_true: &[f64]) -> Result<(Vec<f64>, [f64; K])> {
    graph.expect_len(y_true, "crf_nll_gradients")?;
    let (_, f, m) = log_partition(graph)?;
    let grad_h = (0..graph.nodes())
        .map(|i| 2.0 * (graph.h[i] - y_true[i]) + 2.0 * m[i] - 2.0 * graph.h[i])
        .collect();
    let inv = f.inverse();
    let mut grad_beta = [0.0; K];
    for (k, gb) in grad_beta.iter_mut().enumerate() {
        let s = || graph.similarity.iter().map(move |s| s[k]);
        let trace: f64 = graph
            .edges
            .iter()
            .zip(s())
            .map(|(&(i, j), s)| s * (inv[(i, i)] + inv[(j, j)] - 2.0 * inv[(i, j)]))
            .sum();
        *gb = laplacian_form(&graph.edges, s(), y_true) - 0.5 * trace - laplacian_form(&graph.edges, s(), &m);
    }
    Ok((grad_h, grad_beta))
}

/// `(λ₁/2)‖γ‖² + (λ₂/2)‖β‖²` for flattened unary parameters `γ`.
pub fn crf_regularizer(gamma: &[f64], beta: &[f64], lambda1: f64, lambda2: f64) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    0.5 * lambda1 * sq(gamma) + 0.5 * lambda2 * sq(beta)
}

/// Clips every pairwise weight at zero.
pub fn project_beta(beta: &mut [f64]) {
    for b in beta {
        *b = b.max(0.0);
    }
}
