//! Power-iteration estimate of the largest singular value against a full SVD.
//!
//! `cargo run --example spectral_norm`

use advdepth::spectral_norm::{apply_spectral_norm, SpectralState};
use advdepth::tensor::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn svd_sigma(w: &Tensor) -> f64 {
    let rows = w.shape()[0];
    DMatrix::from_row_slice(rows, w.len() / rows, w.data()).singular_values().max()
}

fn main() -> advdepth::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // a conv weight [out, in, k, k] is treated as an out × (in·k·k) matrix
    let shape = [16, 8, 4, 4];
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let truth = svd_sigma(&w);

    let mut state = SpectralState::new(&shape, 1, &mut rng);
    for n in [1, 2, 5, 20, 100] {
        let mut s = state.clone();
        s.power_iterate(&w, n)?;
        println!("{n:>4} iterations: σ ≈ {:.6}   (SVD {truth:.6})", s.sigma(&w)?);
    }

    state.power_iterate(&w, 200)?;
    let normalized = apply_spectral_norm(&w, &mut state)?;
    println!("largest singular value after normalisation: {:.6}", svd_sigma(&normalized));
    Ok(())
}
