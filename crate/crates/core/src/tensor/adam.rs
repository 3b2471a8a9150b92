use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected ADAM with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self::with_betas(store, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::invalid("optimizer moment count does not match parameters"));
        }
        for (old, new) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            old.expect_same_shape(new, "adam restore")?;
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update with learning rate `lr` using the gradients held in
    /// `store`. Fails without touching any parameter if a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid("optimizer was built for a different parameter set"));
        }
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            }
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[4], value)).unwrap();
        s.get_mut(id).grad = Tensor::full(&[4], grad);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with_grad(1.0, 1.0);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, 0.01).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps)
        for &w in s.iter().next().unwrap().value.data() {
            assert!((1.0 - w - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with_grad(0.3, 0.0);
        let mut opt = Adam::new(&s);
        opt.step(&mut s, 0.1).unwrap();
        assert!(s.iter().next().unwrap().value.data().iter().all(|&w| w == 0.3));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = ParamStore::new();
        let id = s.add("gen.enc0.weight", Tensor::zeros(&[1])).unwrap();
        s.get_mut(id).grad = Tensor::from_parts(vec![1], vec![f64::NAN]);
        let mut opt = Adam::new(&s);
        match opt.step(&mut s, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "gen.enc0.weight"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.value(id).data(), &[0.0]);
    }

    #[test]
    fn two_groups_update_independently() {
        let mut g = store_with_grad(0.0, 1.0);
        let mut d = store_with_grad(0.0, 1.0);
        let (mut og, mut od) = (Adam::new(&g), Adam::new(&d));
        og.step(&mut g, 0.0002).unwrap();
        od.step(&mut d, 0.0008).unwrap();
        let gw = g.iter().next().unwrap().value.data()[0];
        let dw = d.iter().next().unwrap().value.data()[0];
        assert!((dw / gw - 4.0).abs() < 1e-6);
        assert_eq!(og.step_count(), 1);
    }
}
