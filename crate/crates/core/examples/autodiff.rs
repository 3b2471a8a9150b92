//! Reverse-mode differentiation on the tape, checked against a central
//! difference.
//!
//! `cargo run --example autodiff`

use advdepth::tensor::{Activation, Graph, Tensor};

fn loss(w: &Tensor, x: &Tensor) -> advdepth::Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let wv = g.variable(w.clone());
    let xv = g.constant(x.clone());
    let y = g.matvec(wv, xv)?;
    let y = g.activation(y, Activation::Tanh)?;
    let l = g.sum_squares(y);
    let grads = g.backward(l)?;
    Ok((g.value(l).data()[0], grads.get(wv).expect("w is a variable").clone()))
}

fn main() -> advdepth::Result<()> {
    let w = Tensor::from_fn(&[3, 4], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3);
    let x = Tensor::new(&[4], vec![0.5, -1.0, 0.25, 2.0])?;
    let (value, grad) = loss(&w, &x)?;
    println!("loss = {value:.6}");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus.data_mut()[i] += h;
        let mut minus = w.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss(&plus, &x)?.0 - loss(&minus, &x)?.0) / (2.0 * h);
        worst = worst.max((fd - grad.data()[i]).abs());
    }
    println!("max |analytic − finite difference| over {} weights: {worst:.2e}", w.len());
    Ok(())
}
