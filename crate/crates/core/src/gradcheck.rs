//! Finite-difference verification of every differentiable piece.
//!
//! Each check builds a scalar loss on the tape, takes its analytic gradient
//! and compares directional derivatives against central differences along
//! random unit directions. Relative error is
//! `|fd − analytic| / max(|fd|, |analytic|, 1e-8)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crf::{crf_map, crf_map_var, crf_nll_var, CrfGenerator, CrfGeneratorSpec, CrfStructure, SuperpixelGraph, K};
use crate::error::{Error, Result};
use crate::losses::{l1_loss_var, SCORE_EPS};
use crate::nets::{PatchDiscriminator, PatchDiscriminatorSpec, UNet, UNetSpec};
use crate::tensor::{Activation, Graph, Mode, ParamStore, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const MAP_TOLERANCE: f64 = 1e-6;
const STEP: f64 = 1e-5;
const DIRECTIONS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitives,
    /// The U-Net and the patch discriminator.
    UNet,
    Crf,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "unet" => Ok(Scope::UNet),
            "crf" => Ok(Scope::Crf),
            "all" => Ok(Scope::All),
            _ => Err(Error::config(format!("unknown gradcheck scope `{s}`"))),
        }
    }

    fn covers(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seeds: usize,
    /// Name of a check whose analytic gradient is scaled by `1 + 1e-3`
    /// before comparison, to confirm the detector catches a wrong gradient.
    pub fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seeds: 20, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<5} {:<28} seeds {:>3}  max error {:.3e}  (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seeds,
            self.max_error,
            self.tolerance
        )
    }
}

/// Loss as a function of the flattened inputs.
type Eval<'a> = dyn Fn(&[f64]) -> Result<f64> + 'a;

fn rel_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

/// Worst directional mismatch of `grad` against central differences of `f`
/// around `x0`.
fn directional(f: &Eval<'_>, x0: &[f64], grad: &[f64], rng: &mut impl Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..DIRECTIONS {
        let mut d: Vec<f64> = x0.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= n);
        let at = |t: f64| -> Vec<f64> { x0.iter().zip(&d).map(|(x, d)| x + t * d).collect() };
        let fd = (f(&at(STEP))? - f(&at(-STEP))?) / (2.0 * STEP);
        let an: f64 = grad.iter().zip(&d).map(|(g, d)| g * d).sum();
        worst = worst.max(rel_error(fd, an));
    }
    Ok(worst)
}

/// Splits a flat vector into tensors shaped like `shapes`.
fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat[off..off + n].to_vec());
            off += n;
            t
        })
        .collect()
}

/// Checks a loss built from plain input tensors.
fn check_inputs(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>,
    fault: bool,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut grad: Vec<f64> = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.get(*v) {
            Some(gt) => grad.extend_from_slice(gt.data()),
            None => grad.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    if fault {
        grad.iter_mut().for_each(|v| *v *= 1.0 + 1e-3);
    }
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let x0: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let f = |x: &[f64]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = unflatten(x, &shapes)?.into_iter().map(|t| g.constant(t)).collect();
        let l = build(&mut g, &vars)?;
        Ok(g.value(l).data()[0])
    };
    directional(&f, &x0, &grad, rng)
}

/// Checks a loss over a network's parameters and one input tensor.
fn check_net<N: Clone>(
    net: &N,
    store_of: fn(&mut N) -> &mut ParamStore,
    input: &Tensor,
    build: &dyn Fn(&mut Graph, &N, Var, bool) -> Result<Var>,
    fault: bool,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut work = net.clone();
    store_of(&mut work).zero_grad();
    let mut g = Graph::new();
    let x = g.variable(input.clone());
    let loss = build(&mut g, &work, x, false)?;
    let grads = g.backward(loss)?;
    let store = store_of(&mut work);
    store.accumulate(&grads);
    let mut grad = store.flat_grads();
    match grads.get(x) {
        Some(t) => grad.extend_from_slice(t.data()),
        None => grad.extend(std::iter::repeat_n(0.0, input.len())),
    }
    if fault {
        grad.iter_mut().for_each(|v| *v *= 1.0 + 1e-3);
    }
    let n_params = store.scalar_count();
    let mut x0 = store.flat_values();
    x0.extend_from_slice(input.data());
    let f = |flat: &[f64]| -> Result<f64> {
        let mut n = work.clone();
        store_of(&mut n).set_flat_values(&flat[..n_params])?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(input.shape(), flat[n_params..].to_vec())?);
        let l = build(&mut g, &n, x, true)?;
        Ok(g.value(l).data()[0])
    };
    directional(&f, &x0, &grad, rng)
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ c ⊙ out` with a fixed random `c`, turning any output into a scalar
/// with a generic upstream gradient.
fn project(g: &mut Graph, out: Var, c: &Tensor) -> Result<Var> {
    let cv = g.constant(c.clone());
    let p = g.mul(out, cv)?;
    Ok(g.sum(p))
}

struct Case {
    name: &'static str,
    scope: Scope,
    run: Box<dyn Fn(&mut ChaCha8Rng, bool) -> Result<f64>>,
}

fn primitive(name: &'static str, shapes: Vec<Vec<usize>>, out_shape: Vec<usize>, lo: f64, hi: f64, op: fn(&mut Graph, &[Var]) -> Result<Var>) -> Case {
    Case {
        name,
        scope: Scope::Primitives,
        run: Box::new(move |rng, fault| {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(rng, s, lo, hi)).collect();
            let c = uniform(rng, &out_shape, -1.0, 1.0);
            check_inputs(&inputs, &|g, v| { let o = op(g, v)?; if out_shape.is_empty() { Ok(o) } else { project(g, o, &c) } }, fault, rng)
        }),
    }
}

fn cases() -> Vec<Case> {
    let mut v = vec![
        primitive("conv2d", vec![vec![2, 6, 6], vec![3, 2, 3, 3], vec![3]], vec![3, 4, 4], -1.0, 1.0, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 0)
        }),
        primitive("conv2d_stride2_pad1", vec![vec![2, 8, 8], vec![3, 2, 4, 4], vec![3]], vec![3, 4, 4], -1.0, 1.0, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        primitive("conv_transpose2d", vec![vec![3, 4, 4], vec![3, 2, 4, 4], vec![2]], vec![2, 8, 8], -1.0, 1.0, |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        primitive("leaky_relu", vec![vec![2, 3, 3]], vec![2, 3, 3], -1.0, 1.0, |g, v| g.activation(v[0], Activation::LeakyRelu(0.2))),
        primitive("relu", vec![vec![2, 3, 3]], vec![2, 3, 3], -1.0, 1.0, |g, v| g.activation(v[0], Activation::Relu)),
        primitive("tanh", vec![vec![2, 3, 3]], vec![2, 3, 3], -2.0, 2.0, |g, v| g.activation(v[0], Activation::Tanh)),
        primitive("sigmoid", vec![vec![2, 3, 3]], vec![2, 3, 3], -3.0, 3.0, |g, v| g.activation(v[0], Activation::Sigmoid)),
        primitive("concat_channels", vec![vec![2, 3, 3], vec![1, 3, 3]], vec![3, 3, 3], -1.0, 1.0, |g, v| g.concat_channels(v[0], v[1])),
        primitive("dropout", vec![vec![2, 4, 4]], vec![2, 4, 4], -1.0, 1.0, |g, v| {
            g.dropout(v[0], 0.5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(7))
        }),
        primitive("instance_norm", vec![vec![2, 4, 4]], vec![2, 4, 4], -1.0, 1.0, |g, v| g.instance_norm(v[0], 1e-5)),
        primitive("add", vec![vec![5], vec![5]], vec![5], -1.0, 1.0, |g, v| g.add(v[0], v[1])),
        primitive("sub", vec![vec![5], vec![5]], vec![5], -1.0, 1.0, |g, v| g.sub(v[0], v[1])),
        primitive("mul", vec![vec![5], vec![5]], vec![5], -1.0, 1.0, |g, v| g.mul(v[0], v[1])),
        primitive("scale", vec![vec![5]], vec![5], -1.0, 1.0, |g, v| Ok(g.scale(v[0], -1.7))),
        primitive("abs", vec![vec![6]], vec![6], -1.0, 1.0, |g, v| Ok(g.abs(v[0]))),
        primitive("sum", vec![vec![2, 3]], vec![], -1.0, 1.0, |g, v| Ok(g.sum(v[0]))),
        primitive("mean", vec![vec![2, 3]], vec![], -1.0, 1.0, |g, v| Ok(g.mean(v[0]))),
        primitive("sum_squares", vec![vec![2, 3]], vec![], -1.0, 1.0, |g, v| Ok(g.sum_squares(v[0]))),
        primitive("reshape", vec![vec![2, 3]], vec![3, 2], -1.0, 1.0, |g, v| g.reshape(v[0], &[3, 2])),
        primitive("matvec", vec![vec![3, 8], vec![2, 2, 2]], vec![3], -1.0, 1.0, |g, v| g.matvec(v[0], v[1])),
        primitive("stack", vec![vec![2], vec![3]], vec![5], -1.0, 1.0, |g, v| g.stack(&[v[0], v[1]])),
        primitive("gather", vec![vec![4]], vec![2, 3], -1.0, 1.0, |g, v| {
            g.gather(v[0], Arc::new(vec![0, 3, 3, 1, 2, 0]), &[2, 3])
        }),
        primitive("bce_real", vec![vec![1, 3, 3]], vec![], 0.05, 0.95, |g, v| Ok(g.bce_mean(v[0], true, SCORE_EPS))),
        primitive("bce_fake", vec![vec![1, 3, 3]], vec![], 0.05, 0.95, |g, v| Ok(g.bce_mean(v[0], false, SCORE_EPS))),
        primitive("l1_loss", vec![vec![1, 3, 3], vec![1, 3, 3]], vec![], -1.0, 1.0, |g, v| l1_loss_var(g, v[0], v[1])),
    ];
    v.push(Case {
        name: "spectral_normalize",
        scope: Scope::Primitives,
        run: Box::new(|rng, fault| {
            let w = uniform(rng, &[3, 2, 2, 2], -1.0, 1.0);
            let mut s = crate::spectral_norm::SpectralState::new(w.shape(), 1, rng);
            s.power_iterate(&w, 30)?;
            let (u, vv) = (Arc::new(s.u().to_vec()), Arc::new(s.v().to_vec()));
            let c = uniform(rng, w.shape(), -1.0, 1.0);
            check_inputs(
                &[w],
                &|g, v| {
                    let o = g.spectral_normalize(v[0], Arc::clone(&u), Arc::clone(&vv))?;
                    project(g, o, &c)
                },
                fault,
                rng,
            )
        }),
    });
    v.push(Case {
        name: "unet",
        scope: Scope::UNet,
        run: Box::new(|rng, fault| {
            let net = UNet::new(UNetSpec { max_channels: 32, ..UNetSpec::new(64, 4) }, rng)?;
            let x = uniform(rng, &[3, 64, 64], -1.0, 1.0);
            let c = uniform(rng, &[1, 64, 64], -1.0, 1.0);
            let mask_seed: u64 = rng.random();
            check_net(
                &net,
                |n| &mut n.store,
                &x,
                &|g, n, x, frozen| {
                    // same dropout mask on every evaluation
                    let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                    let opts = crate::nets::UNetForwardOptions { frozen, ..Default::default() };
                    let out = n.forward_with(g, x, Mode::Train, &mut r, &opts)?;
                    project(g, out, &c)
                },
                fault,
                rng,
            )
        }),
    });
    v.push(Case {
        name: "discriminator",
        scope: Scope::UNet,
        run: Box::new(|rng, fault| {
            let net = PatchDiscriminator::new(PatchDiscriminatorSpec::scaled(4), rng)?;
            let x = uniform(rng, &[4, 64, 64], -1.0, 1.0);
            check_net(
                &net,
                |n| &mut n.store,
                &x,
                &|g, n, x, frozen| {
                    let s = n.forward(g, x, frozen)?;
                    Ok(g.bce_mean(s, true, SCORE_EPS))
                },
                fault,
                rng,
            )
        }),
    });
    v.push(Case {
        name: "crf_map",
        scope: Scope::Crf,
        run: Box::new(|rng, fault| {
            let n = rng.random_range(1..=8);
            let s = random_structure(rng, n);
            let h = uniform(rng, &[n], -1.0, 1.0);
            let beta = uniform(rng, &[K], 0.2, 2.0);
            let c = uniform(rng, &[n], -1.0, 1.0);
            check_inputs(&[h, beta], &|g, v| { let y = crf_map_var(g, &s, v[0], v[1])?; project(g, y, &c) }, fault, rng)
        }),
    });
    v.push(Case {
        name: "crf_nll",
        scope: Scope::Crf,
        run: Box::new(|rng, fault| {
            let n = rng.random_range(1..=8);
            let s = random_structure(rng, n);
            let h = uniform(rng, &[n], -1.0, 1.0);
            let beta = uniform(rng, &[K], 0.2, 2.0);
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            check_inputs(&[h, beta], &|g, v| crf_nll_var(g, &s, v[0], v[1], y.clone()), fault, rng)
        }),
    });
    v.push(Case {
        name: "crf_nll_through_unary_cnn",
        scope: Scope::Crf,
        run: Box::new(|rng, fault| {
            let spec = CrfGeneratorSpec { patch_size: 8, base_channels: 2, beta_init: [0.7, 1.3], ..Default::default() };
            let net = CrfGenerator::new(spec, rng)?;
            let x = uniform(rng, &[3, 16, 16], -1.0, 1.0);
            let depth = uniform(rng, &[1, 16, 16], -1.0, 1.0);
            // the image only feeds segmentation and patches, so the check runs over parameters
            check_net(
                &net,
                |n| &mut n.store,
                &x,
                &|g, n, _x, frozen| {
                    let img = g.constant(x.clone());
                    let fwd = n.forward_detailed(g, img, frozen)?;
                    let nll = n.nll_loss(g, &fwd, &depth)?;
                    let reg = n.regularizer(g)?;
                    g.add(nll, reg)
                },
                fault,
                rng,
            )
        }),
    });
    v
}

fn random_structure(rng: &mut impl Rng, n: usize) -> Arc<CrfStructure> {
    let mut edges = Vec::new();
    for j in 1..n {
        edges.push((rng.random_range(0..j), j));
    }
    for i in 0..n {
        for j in i + 1..n {
            if !edges.contains(&(i, j)) && rng.random_bool(0.3) {
                edges.push((i, j));
            }
        }
    }
    let similarity = edges.iter().map(|_| [rng.random_range(0.05..=1.0), rng.random_range(0.05..=1.0)]).collect();
    Arc::new(CrfStructure { nodes: n, edges, similarity })
}

/// Maximises the CRF energy by plain gradient ascent, independently of the
/// linear solve.
pub fn map_by_ascent(graph: &SuperpixelGraph) -> Vec<f64> {
    let w = graph.weights();
    let n = graph.nodes();
    let mut degree = vec![0.0; n];
    for (&(i, j), &wij) in graph.edges.iter().zip(&w) {
        degree[i] += wij;
        degree[j] += wij;
    }
    // 1/L with L = 2(1 + 2·max weighted degree) bounds the Hessian
    let lip = 2.0 * (1.0 + 2.0 * degree.iter().cloned().fold(0.0, f64::max));
    let mut y = graph.h.clone();
    for _ in 0..200_000 {
        let mut grad: Vec<f64> = y.iter().zip(&graph.h).map(|(y, h)| -2.0 * (y - h)).collect();
        for (&(i, j), &wij) in graph.edges.iter().zip(&w) {
            let d = 2.0 * wij * (y[i] - y[j]);
            grad[i] -= d;
            grad[j] += d;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        y.iter_mut().zip(&grad).for_each(|(y, g)| *y += g / lip);
        if norm < 1e-13 {
            break;
        }
    }
    y
}

fn map_oracle_case(rng: &mut ChaCha8Rng, fault: bool) -> Result<f64> {
    let n = rng.random_range(1..=6);
    let s = random_structure(rng, n);
    let h = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let beta = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
    let graph = SuperpixelGraph::new(s.edges.clone(), s.similarity.clone(), h, beta)?;
    let mut solved = crf_map(&graph)?;
    if fault {
        solved[0] += 1e-3;
    }
    let ascent = map_by_ascent(&graph);
    Ok(solved.iter().zip(&ascent).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Runs every check in `scope`, each over `opts.seeds` seeds.
pub fn run_gradcheck(scope: Scope, opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let seeds = opts.seeds.max(1);
    for case in cases().into_iter().filter(|c| scope.covers(c.scope)) {
        let fault = opts.fault.as_deref() == Some(case.name);
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            worst = worst.max((case.run)(&mut rng, fault)?);
        }
        log::debug!("{}: {worst:e}", case.name);
        out.push(CheckResult {
            name: case.name.to_string(),
            seeds,
            max_error: worst,
            tolerance: GRAD_TOLERANCE,
            passed: worst < GRAD_TOLERANCE,
        });
    }
    if scope.covers(Scope::Crf) {
        let name = "crf_map_vs_ascent";
        let fault = opts.fault.as_deref() == Some(name);
        let mut worst: f64 = 0.0;
        for seed in 0..seeds.max(100) {
            worst = worst.max(map_oracle_case(&mut ChaCha8Rng::seed_from_u64(seed as u64), fault)?);
        }
        out.push(CheckResult {
            name: name.to_string(),
            seeds: seeds.max(100),
            max_error: worst,
            tolerance: MAP_TOLERANCE,
            passed: worst < MAP_TOLERANCE,
        });
    }
    Ok(out)
}

/// Names of all checks, for fault injection.
pub fn check_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = cases().iter().map(|c| c.name).collect();
    v.push("crf_map_vs_ascent");
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_with_few_seeds() {
        let r = run_gradcheck(Scope::Primitives, &GradcheckOptions { seeds: 3, fault: None }).unwrap();
        for c in &r {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn injected_fault_is_named() {
        let opts = GradcheckOptions { seeds: 2, fault: Some("matvec".into()) };
        let r = run_gradcheck(Scope::Primitives, &opts).unwrap();
        let failed: Vec<&str> = r.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["matvec"]);
    }

    #[test]
    fn ascent_oracle_matches_hand_case() {
        let g = SuperpixelGraph::new(vec![(0, 1)], vec![[1.0, 1.0]], vec![0.0, 1.0], [0.5, 0.5]).unwrap();
        let y = map_by_ascent(&g);
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-10 && (y[1] - 2.0 / 3.0).abs() < 1e-10);
    }
}
