use rand::Rng;

use crate::error::Result;
use crate::spectral_norm::SpectralState;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::trainer::xavier_init;

/// Cold-start power iterations run once when a normalised layer is built.
pub const SPECTRAL_WARMUP_ITERS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { stride: usize, pad: usize },
    ConvTranspose { stride: usize, pad: usize },
    Linear,
}

/// A weight/bias pair with an optional spectral normaliser on the weight.
#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: ParamId,
    pub bias: ParamId,
    pub spectral: Option<SpectralState>,
}

impl Layer {
    pub fn conv(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spectral_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(
            store,
            name,
            LayerKind::Conv { stride, pad },
            &[out_ch, in_ch, kernel, kernel],
            out_ch,
            spectral_norm,
            rng,
        )
    }

    pub fn conv_transpose(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        spectral_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(
            store,
            name,
            LayerKind::ConvTranspose { stride, pad },
            &[in_ch, out_ch, kernel, kernel],
            out_ch,
            spectral_norm,
            rng,
        )
    }

    pub fn linear(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        spectral_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::build(
            store,
            name,
            LayerKind::Linear,
            &[out_features, in_features],
            out_features,
            spectral_norm,
            rng,
        )
    }

    fn build(
        store: &mut ParamStore,
        name: &str,
        kind: LayerKind,
        shape: &[usize],
        out_ch: usize,
        spectral_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = xavier_init(shape, rng);
        let spectral = if spectral_norm {
            let mut s = SpectralState::new(shape, 1, rng);
            s.power_iterate(&w, SPECTRAL_WARMUP_ITERS)?;
            Some(s)
        } else {
            None
        };
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Self {
            name: name.to_string(),
            kind,
            weight,
            bias,
            spectral,
        })
    }

    pub fn weight_shape<'a>(&self, store: &'a ParamStore) -> &'a [usize] {
        store.value(self.weight).shape()
    }

    /// One warm-started power-iteration update of the spectral estimate.
    pub fn advance_spectral(&mut self, store: &ParamStore) -> Result<()> {
        if let Some(s) = &mut self.spectral {
            let n = s.iterations_per_update;
            s.power_iterate(store.value(self.weight), n)?;
        }
        Ok(())
    }

    /// The weight used by forward passes (`W/σ` when normalised).
    pub fn effective_weight(&self, store: &ParamStore) -> Result<Tensor> {
        let w = store.value(self.weight);
        match &self.spectral {
            Some(s) => Ok(w.scale(1.0 / s.sigma(w)?)),
            None => Ok(w.clone()),
        }
    }

    /// Applies the layer. With `frozen` the parameters enter as constants.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, frozen: bool) -> Result<Var> {
        let (w, b) = if frozen {
            (g.frozen_param(store, self.weight), g.frozen_param(store, self.bias))
        } else {
            (g.param(store, self.weight), g.param(store, self.bias))
        };
        let w = match &self.spectral {
            Some(s) => s.normalize_var(g, w)?,
            None => w,
        };
        match self.kind {
            LayerKind::Conv { stride, pad } => g.conv2d(x, w, Some(b), stride, pad),
            LayerKind::ConvTranspose { stride, pad } => g.conv_transpose2d(x, w, Some(b), stride, pad),
            LayerKind::Linear => {
                let y = g.matvec(w, x)?;
                g.add(y, b)
            }
        }
    }
}
