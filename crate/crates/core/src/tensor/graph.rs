use std::sync::Arc;

use rand::Rng;

use super::kernels;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise activation on a plain tensor.
pub fn activation(input: &Tensor, kind: Activation) -> Result<Tensor> {
    if let Activation::LeakyRelu(slope) = kind {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
    }
    Ok(input.map(|x| kind.apply(x)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted-dropout mask: kept entries carry `1/(1−p)`, dropped entries 0.
pub fn dropout_mask(len: usize, p: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    let keep = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

/// Dropout on a plain tensor; identity in eval mode or when `p == 0`.
pub fn dropout(input: &Tensor, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.len(), p, rng)?;
    Ok(Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
    ))
}

/// A differentiable operation implemented outside this module.
///
/// `backward` receives the forward inputs and output and returns one gradient
/// per input, in input order.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Param { tag: u64, index: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    ConvTranspose2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Act { x: usize, kind: Activation },
    Concat { a: usize, b: usize },
    Dropout { x: usize, mask: Vec<f64> },
    InstanceNorm { x: usize, inv_std: Vec<f64> },
    SpectralNormalize { w: usize, u: Arc<Vec<f64>>, v: Arc<Vec<f64>>, sigma: f64 },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, s: f64 },
    Abs { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SumSquares { x: usize },
    Reshape { x: usize },
    MatVec { w: usize, x: usize },
    Stack { xs: Vec<usize> },
    Gather { x: usize, index: Arc<Vec<usize>> },
    Bce { x: usize, real: bool, eps: f64 },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward pass so that [`Graph::backward`] can replay it in reverse.
///
/// A graph is single-owner. Build one per sample and accumulate the resulting
/// gradients into the parameter stores.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A parameter leaf; its gradient is routed back to `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.push(
            value,
            Op::Param {
                tag: store.tag(),
                index: id.index(),
            },
            true,
        )
    }

    /// A parameter used as a constant (no gradient is computed for it).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let ng = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), stride, pad },
            ng,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = kernels::conv_transpose2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let ng = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::ConvTranspose2d { x: x.0, w: w.0, b: b.map(|b| b.0), stride, pad },
            ng,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let value = activation(self.value(x), kind)?;
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::Act { x: x.0, kind }, ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::concat_channels(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Concat { a: a.0, b: b.0 }, ng))
    }

    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), p, rng)?;
        let xv = self.value(x);
        let value = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        );
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::Dropout { x: x.0, mask }, ng))
    }

    /// Per-channel normalisation over the spatial extent, without affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3()?;
        let plane = h * w;
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let src = &xv.data()[ch * plane..(ch + 1) * plane];
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::InstanceNorm { x: x.0, inv_std }, ng))
    }

    /// `W / σ` with `σ = uᵀ W v` for fixed singular-vector estimates `u`, `v`;
    /// `W` is viewed as a `[rows, rest]` matrix.
    pub fn spectral_normalize(&mut self, w: Var, u: Arc<Vec<f64>>, v: Arc<Vec<f64>>) -> Result<Var> {
        let wv = self.value(w);
        let rows = wv.shape()[0];
        let cols = wv.len() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(Error::Dimension {
                op: "spectral_normalize",
                axis: "singular vector",
                expected: rows * cols,
                actual: u.len() * v.len(),
            });
        }
        let sigma = bilinear(wv.data(), &u, &v);
        if sigma.abs() < 1e-12 {
            return Err(Error::Degenerate(format!(
                "spectral norm estimate {sigma:e} is too small to normalise by"
            )));
        }
        let value = wv.scale(1.0 / sigma);
        let ng = self.nodes[w.0].needs_grad;
        Ok(self.push(value, Op::SpectralNormalize { w: w.0, u, v, sigma }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_same_shape(bv, name)?;
        av.zip_map(bv, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.any_grad(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Scale { x: x.0, s }, ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Abs { x: x.0 }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Sum { x: x.0 }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Mean { x: x.0 }, ng)
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::SumSquares { x: x.0 }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(value, Op::Reshape { x: x.0 }, ng))
    }

    /// `W·flatten(x)` for `W` of shape `[m, n]`; the result has shape `[m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        let [m, n] = wv.shape()[..] else {
            return Err(Error::invalid(format!("matvec weight must be 2-D, got {:?}", wv.shape())));
        };
        if xv.len() != n {
            return Err(Error::Dimension { op: "matvec", axis: "inner", expected: n, actual: xv.len() });
        }
        let mut out = vec![0.0; m];
        kernels::gemm(m, n, 1, wv.data(), false, xv.data(), false, 0.0, &mut out);
        let ng = self.any_grad(&[w.0, x.0]);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::MatVec { w: w.0, x: x.0 }, ng))
    }

    /// Concatenates the flattened values of `xs` into one vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("stack of zero tensors"));
        }
        let data: Vec<f64> = xs.iter().flat_map(|v| self.value(*v).data().iter().copied()).collect();
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let ng = self.any_grad(&ids);
        Ok(self.push(Tensor::from_parts(vec![data.len()], data), Op::Stack { xs: ids }, ng))
    }

    /// `out[i] = flatten(x)[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::invalid(format!(
                "gather: {} indices cannot fill shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range {}", xv.len())));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather { x: x.0, index }, ng))
    }

    /// Mean binary cross-entropy of probabilities against a constant label.
    ///
    /// `real = true` gives `mean(−log s)`, otherwise `mean(−log(1 − s))`.
    /// Scores are clamped to `[eps, 1 − eps]`; clamped cells pass no gradient.
    pub fn bce_mean(&mut self, x: Var, real: bool, eps: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(crate::losses::bce_mean_value(xv.data(), real, eps));
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, Op::Bce { x: x.0, real, eps }, ng)
    }

    /// Records an externally computed output together with its adjoint.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let ng = self.any_grad(&ids);
        self.push(output, Op::Custom { inputs: ids, op }, ng)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut work: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut params = Vec::new();
        work[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(g) = work[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            let g = Tensor::from_parts(node.value.shape().to_vec(), g);
            match &node.op {
                Op::Leaf => {
                    kept[i] = Some(g);
                }
                Op::Param { tag, index } => {
                    params.push((*tag, *index, i));
                    kept[i] = Some(g);
                }
                op => self.propagate(op, &node.value, &g, &mut work)?,
            }
        }
        Ok(Gradients { grads: kept, params })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        work: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let needs = |i: usize| self.nodes[i].needs_grad;
        let mut acc = |i: usize, grad: &[f64]| {
            if !self.nodes[i].needs_grad {
                return;
            }
            match &mut work[i] {
                Some(buf) => buf.iter_mut().zip(grad).for_each(|(b, v)| *b += v),
                slot @ None => *slot = Some(grad.to_vec()),
            }
        };
        let val = |i: usize| &self.nodes[i].value;
        match op {
            Op::Leaf | Op::Param { .. } => unreachable!(),
            Op::Conv2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), *stride, *pad, g)?;
                acc(*x, gx.data());
                acc(*w, gw.data());
                if let Some(b) = b {
                    acc(*b, gb.data());
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (gx, gw, gb) =
                    kernels::conv_transpose2d_backward(val(*x), val(*w), *stride, *pad, g)?;
                acc(*x, gx.data());
                acc(*w, gw.data());
                if let Some(b) = b {
                    acc(*b, gb.data());
                }
            }
            Op::Act { x, kind } => {
                let gx: Vec<f64> = val(*x)
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                acc(*x, &gx);
            }
            Op::Concat { a, b } => {
                let na = val(*a).len();
                acc(*a, &g.data()[..na]);
                acc(*b, &g.data()[na..]);
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<f64> = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                acc(*x, &gx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let (c, h, w) = out.dims3()?;
                let plane = (h * w) as f64;
                let n = h * w;
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    let y = &out.data()[ch * n..(ch + 1) * n];
                    let gy = &g.data()[ch * n..(ch + 1) * n];
                    let mean_g = gy.iter().sum::<f64>() / plane;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / plane;
                    for j in 0..n {
                        gx[ch * n + j] = inv_std[ch] * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                acc(*x, &gx);
            }
            Op::SpectralNormalize { w, u, v, sigma } => {
                // d(W/σ) = dW/σ − W·(uᵀ dW v)/σ²
                let wv = val(*w).data();
                let cols = v.len();
                let inner: f64 = g.data().iter().zip(wv).map(|(a, b)| a * b).sum();
                let coeff = inner / (sigma * sigma);
                let gw: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, gi)| gi / sigma - coeff * u[idx / cols] * v[idx % cols])
                    .collect();
                acc(*w, &gw);
            }
            Op::Add { a, b } => {
                acc(*a, g.data());
                acc(*b, g.data());
            }
            Op::Sub { a, b } => {
                acc(*a, g.data());
                if needs(*b) {
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    acc(*b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if needs(*a) {
                    let ga: Vec<f64> = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    acc(*a, &ga);
                }
                if needs(*b) {
                    let gb: Vec<f64> = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    acc(*b, &gb);
                }
            }
            Op::Scale { x, s } => {
                let gx: Vec<f64> = g.data().iter().map(|v| v * s).collect();
                acc(*x, &gx);
            }
            Op::Abs { x } => {
                let gx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gi, xi)| {
                        if *xi > 0.0 {
                            *gi
                        } else if *xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(*x, &gx);
            }
            Op::Sum { x } => {
                acc(*x, &vec![g.data()[0]; val(*x).len()]);
            }
            Op::Mean { x } => {
                let n = val(*x).len();
                acc(*x, &vec![g.data()[0] / n as f64; n]);
            }
            Op::SumSquares { x } => {
                let gx: Vec<f64> = val(*x).data().iter().map(|v| 2.0 * v * g.data()[0]).collect();
                acc(*x, &gx);
            }
            Op::Reshape { x } => acc(*x, g.data()),
            Op::MatVec { w, x } => {
                let (wv, xv) = (val(*w), val(*x));
                let (m, n) = (wv.shape()[0], wv.shape()[1]);
                if needs(*w) {
                    let mut gw = vec![0.0; m * n];
                    kernels::gemm(m, 1, n, g.data(), false, xv.data(), false, 0.0, &mut gw);
                    acc(*w, &gw);
                }
                if needs(*x) {
                    let mut gx = vec![0.0; n];
                    kernels::gemm(n, m, 1, wv.data(), true, g.data(), false, 0.0, &mut gx);
                    acc(*x, &gx);
                }
            }
            Op::Stack { xs } => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).len();
                    acc(x, &g.data()[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (gi, &i) in g.data().iter().zip(index.iter()) {
                    gx[i] += gi;
                }
                acc(*x, &gx);
            }
            Op::Bce { x, real, eps } => {
                let xv = val(*x).data();
                let scale = g.data()[0] / xv.len() as f64;
                let gx: Vec<f64> = xv
                    .iter()
                    .map(|&s| {
                        if s < *eps || s > 1.0 - eps {
                            0.0
                        } else if *real {
                            -scale / s
                        } else {
                            scale / (1.0 - s)
                        }
                    })
                    .collect();
                acc(*x, &gx);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let grads = op.backward(&ins, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (&i, gi) in inputs.iter().zip(&grads) {
                    acc(i, gi.data());
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn bilinear(w: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Result of [`Graph::backward`]: gradients for every leaf the loss reached.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(u64, usize, usize)>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Graph::variable`] or [`Graph::param`];
    /// `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (u64, usize, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(tag, index, node)| self.grads[node].as_ref().map(|g| (tag, index, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn activation_examples() {
        assert_eq!(Activation::LeakyRelu(0.2).apply(-1.0), -0.2);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert!(activation(&Tensor::scalar(1.0), Activation::LeakyRelu(1.5)).is_err());
    }

    #[test]
    fn relu_is_leaky_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[64], |_| rng.random_range(-2.0..2.0));
        let relu = activation(&x, Activation::Relu).unwrap();
        let leaky = activation(&x, Activation::LeakyRelu(1e-12)).unwrap();
        assert!(relu.max_abs_diff(&leaky).unwrap() < 1e-11);
    }

    #[test]
    fn dropout_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[16], |i| i as f64);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)).unwrap();
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let xv = g.constant(x.clone());
        let y = g.matvec(wv, xv).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&grads);
        let expect: Vec<f64> = [x.data(), x.data()].concat();
        assert_eq!(store.get(w).grad.data(), &expect[..]);
    }

    #[test]
    fn unreachable_parameter_gets_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 1.0)).unwrap();
        let b = store.add("b", Tensor::full(&[2], 1.0)).unwrap();
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let _bv = g.param(&store, b);
        let loss = g.sum_squares(av);
        let grads = g.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&grads);
        assert!(store.get(b).grad.data().iter().all(|&v| v == 0.0));
        assert_eq!(store.get(a).grad.data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));
    }
}
