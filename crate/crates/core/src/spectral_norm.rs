//! Spectral normalisation by power iteration.
//!
//! A weight tensor of shape `[d0, d1, ...]` is viewed as a `d0 × (d1·…)`
//! matrix. The layer keeps warm-started estimates of the leading left and
//! right singular vectors and divides the weight by `σ = uᵀ W v`.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    u: Arc<Vec<f64>>,
    v: Arc<Vec<f64>>,
    pub iterations_per_update: usize,
}

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn matrix_dims(w: &Tensor) -> (usize, usize) {
    let rows = w.shape()[0];
    (rows, w.len() / rows)
}

impl SpectralState {
    /// Random unit vectors sized for weights shaped like `shape`.
    pub fn new(shape: &[usize], iterations_per_update: usize, rng: &mut impl Rng) -> Self {
        let rows = shape[0];
        let cols = shape.iter().product::<usize>() / rows;
        let mut u: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&mut u);
        normalize(&mut v);
        Self {
            u: Arc::new(u),
            v: Arc::new(v),
            iterations_per_update: iterations_per_update.max(1),
        }
    }

    pub fn from_vectors(u: Vec<f64>, v: Vec<f64>, iterations_per_update: usize) -> Self {
        Self {
            u: Arc::new(u),
            v: Arc::new(v),
            iterations_per_update,
        }
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    fn check(&self, w: &Tensor) -> Result<(usize, usize)> {
        let (rows, cols) = matrix_dims(w);
        if rows != self.u.len() || cols != self.v.len() {
            return Err(Error::Shape {
                op: "spectral_norm",
                lhs: vec![self.u.len(), self.v.len()],
                rhs: vec![rows, cols],
            });
        }
        Ok((rows, cols))
    }

    /// Runs `n` power-iteration updates `v ← Wᵀu/‖·‖, u ← Wv/‖·‖`.
    pub fn power_iterate(&mut self, w: &Tensor, n: usize) -> Result<()> {
        let (rows, cols) = self.check(w)?;
        let wd = w.data();
        let u = Arc::make_mut(&mut self.u);
        let v = Arc::make_mut(&mut self.v);
        for _ in 0..n {
            v.iter_mut().for_each(|x| *x = 0.0);
            for r in 0..rows {
                let ur = u[r];
                for (vc, wrc) in v.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                    *vc += ur * wrc;
                }
            }
            if normalize(v) == 0.0 {
                return Err(Error::Degenerate(
                    "power iteration collapsed: Wᵀu is zero".into(),
                ));
            }
            for r in 0..rows {
                u[r] = wd[r * cols..(r + 1) * cols].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            }
            if normalize(u) == 0.0 {
                return Err(Error::Degenerate("power iteration collapsed: Wv is zero".into()));
            }
        }
        Ok(())
    }

    /// `uᵀ W v` with the current vectors.
    pub fn sigma(&self, w: &Tensor) -> Result<f64> {
        self.check(w)?;
        Ok(crate::tensor::graph_bilinear(w.data(), &self.u, &self.v))
    }

    /// Advances the estimate by the configured number of updates and returns σ.
    pub fn estimate_sigma(&mut self, w: &Tensor) -> Result<f64> {
        if w.data().iter().all(|&x| x == 0.0) {
            return Err(Error::Degenerate(
                "spectral norm of a zero matrix has no leading direction".into(),
            ));
        }
        self.power_iterate(w, self.iterations_per_update)?;
        self.sigma(w)
    }

    /// Records `W / σ(W)` in `g`, differentiating through σ with `u`, `v` fixed.
    pub fn normalize_var(&self, g: &mut Graph, w: Var) -> Result<Var> {
        g.spectral_normalize(w, Arc::clone(&self.u), Arc::clone(&self.v))
    }
}

/// `W / σ(W)`, advancing `state` first.
pub fn apply_spectral_norm(w: &Tensor, state: &mut SpectralState) -> Result<Tensor> {
    let sigma = state.estimate_sigma(w)?;
    if sigma < 1e-12 {
        return Err(Error::Degenerate(format!("σ = {sigma:e} is below 1e-12")));
    }
    Ok(w.scale(1.0 / sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(&[rows, cols], data).unwrap()
    }

    #[test]
    fn diagonal_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = mat(2, 2, vec![3.0, 0.0, 0.0, 1.0]);
        let mut s = SpectralState::new(w.shape(), 50, &mut rng);
        assert!((s.estimate_sigma(&w).unwrap() - 3.0).abs() < 1e-9);
        let p = mat(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let mut s = SpectralState::new(p.shape(), 5, &mut rng);
        assert!((s.estimate_sigma(&p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::zeros(&[3, 3]);
        let mut s = SpectralState::new(w.shape(), 3, &mut rng);
        assert!(matches!(s.estimate_sigma(&w), Err(Error::Degenerate(_))));
        assert!(apply_spectral_norm(&w, &mut s).is_err());
    }

    #[test]
    fn unit_vectors_after_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::from_fn(&[4, 2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let mut s = SpectralState::new(w.shape(), 1, &mut rng);
        s.estimate_sigma(&w).unwrap();
        let nu: f64 = s.u().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv: f64 = s.v().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((nu - 1.0).abs() < 1e-6 && (nv - 1.0).abs() < 1e-6);
        assert_eq!(s.v().len(), 18);
    }

    #[test]
    fn fixed_point_is_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = mat(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
        let mut s = SpectralState::new(w.shape(), 30, &mut rng);
        let n = apply_spectral_norm(&w, &mut s).unwrap();
        assert!(n.max_abs_diff(&w).unwrap() < 1e-6);
    }
}
