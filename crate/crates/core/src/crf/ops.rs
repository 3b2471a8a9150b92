//! Tape operations so the CRF composes with the unary network.

use std::sync::Arc;

use super::{crf_map, crf_nll, crf_nll_gradients, Factor, SuperpixelGraph, K};
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

/// Image-dependent, parameter-free part of a CRF: adjacency and similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfStructure {
    pub nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub similarity: Vec<[f64; K]>,
}

impl CrfStructure {
    fn graph(&self, h: &Tensor, beta: &Tensor) -> Result<SuperpixelGraph> {
        if h.len() != self.nodes {
            return Err(Error::Dimension { op: "crf", axis: "node", expected: self.nodes, actual: h.len() });
        }
        if beta.len() != K {
            return Err(Error::Dimension { op: "crf", axis: "kernel", expected: K, actual: beta.len() });
        }
        SuperpixelGraph::new(
            self.edges.clone(),
            self.similarity.clone(),
            h.data().to_vec(),
            [beta.data()[0], beta.data()[1]],
        )
    }
}

struct MapOp {
    structure: Arc<CrfStructure>,
}

impl CustomOp for MapOp {
    fn name(&self) -> &'static str {
        "crf_map"
    }

    // y* = A⁻¹h: ∂/∂h = A⁻¹ḡ and ∂/∂β_k = −(A⁻¹ḡ)ᵀ L_k y*
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let graph = self.structure.graph(inputs[0], inputs[1])?;
        let f = Factor::new(graph.precision())?;
        let adj = f.solve(grad_out.data());
        let y = output.data();
        let mut gb = [0.0; K];
        for (&(i, j), s) in graph.edges.iter().zip(&graph.similarity) {
            let term = (adj[i] - adj[j]) * (y[i] - y[j]);
            for k in 0..K {
                gb[k] -= s[k] * term;
            }
        }
        Ok(vec![Tensor::new(&[adj.len()], adj)?, Tensor::new(&[K], gb.to_vec())?])
    }
}

struct NllOp {
    structure: Arc<CrfStructure>,
    y_true: Vec<f64>,
}

impl CustomOp for NllOp {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        let graph = self.structure.graph(inputs[0], inputs[1])?;
        let (gh, gb) = crf_nll_gradients(&graph, &self.y_true)?;
        let s = grad_out.data()[0];
        Ok(vec![
            Tensor::new(&[gh.len()], gh.iter().map(|v| v * s).collect())?,
            Tensor::new(&[K], gb.iter().map(|v| v * s).collect())?,
        ])
    }
}

/// MAP labelling as a differentiable function of unaries `h` (`[g]`) and
/// weights `beta` (`[K]`).
pub fn crf_map_var(g: &mut Graph, structure: &Arc<CrfStructure>, h: Var, beta: Var) -> Result<Var> {
    let graph = structure.graph(g.value(h), g.value(beta))?;
    let y = crf_map(&graph)?;
    let out = Tensor::new(&[y.len()], y)?;
    Ok(g.custom(&[h, beta], out, Box::new(MapOp { structure: Arc::clone(structure) })))
}

/// Per-image NLL of `y_true` as a differentiable scalar.
pub fn crf_nll_var(g: &mut Graph, structure: &Arc<CrfStructure>, h: Var, beta: Var, y_true: Vec<f64>) -> Result<Var> {
    let graph = structure.graph(g.value(h), g.value(beta))?;
    let value = crf_nll(&graph, &y_true)?;
    let op = NllOp { structure: Arc::clone(structure), y_true };
    Ok(g.custom(&[h, beta], Tensor::scalar(value), Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn structure(rng: &mut impl Rng, n: usize) -> Arc<CrfStructure> {
        let g = super::super::tests::random_graph(rng, n);
        Arc::new(CrfStructure { nodes: n, edges: g.edges, similarity: g.similarity })
    }

    /// Directional finite difference of `loss(h, beta)` against the tape.
    fn check(build: impl Fn(&mut Graph, Var, Var) -> Var, h: &[f64], beta: &[f64], rng: &mut impl Rng) {
        let mut g = Graph::new();
        let hv = g.variable(Tensor::new(&[h.len()], h.to_vec()).unwrap());
        let bv = g.variable(Tensor::new(&[K], beta.to_vec()).unwrap());
        let loss = build(&mut g, hv, bv);
        let grads = g.backward(loss).unwrap();
        let (gh, gb) = (grads.get(hv).unwrap().clone(), grads.get(bv).unwrap().clone());
        let dh: Vec<f64> = h.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let db: Vec<f64> = beta.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let eval = |t: f64| {
            let mut g = Graph::new();
            let hp: Vec<f64> = h.iter().zip(&dh).map(|(a, d)| a + t * d).collect();
            let bp: Vec<f64> = beta.iter().zip(&db).map(|(a, d)| a + t * d).collect();
            let hv = g.constant(Tensor::new(&[hp.len()], hp).unwrap());
            let bv = g.constant(Tensor::new(&[K], bp).unwrap());
            let l = build(&mut g, hv, bv);
            g.value(l).data()[0]
        };
        let eps = 1e-5;
        let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        let analytic: f64 = gh.data().iter().zip(&dh).chain(gb.data().iter().zip(&db)).map(|(g, d)| g * d).sum();
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
        assert!(rel < 1e-4, "fd {fd} vs analytic {analytic}");
    }

    #[test]
    fn map_op_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=8 {
            let s = structure(&mut rng, n);
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let beta = [rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let weights = Tensor::new(&[n], w).unwrap();
            check(
                |g, h, b| {
                    let y = crf_map_var(g, &s, h, b).unwrap();
                    let c = g.constant(weights.clone());
                    let p = g.mul(y, c).unwrap();
                    g.sum(p)
                },
                &h,
                &beta,
                &mut rng,
            );
        }
    }

    #[test]
    fn nll_op_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in 1..=8 {
            let s = structure(&mut rng, n);
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let beta = [rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
            check(|g, h, b| crf_nll_var(g, &s, h, b, y.clone()).unwrap(), &h, &beta, &mut rng);
        }
    }
}
