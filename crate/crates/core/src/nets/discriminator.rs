use rand::Rng;

use super::layer::Layer;
use super::unet::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, Activation, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminatorSpec {
    pub layers: Vec<DiscLayerSpec>,
    pub pad: usize,
    /// RGB (3) plus depth (1).
    pub in_channels: usize,
    pub use_spectral_norm: bool,
}

impl Default for PatchDiscriminatorSpec {
    /// Three 4×4 stride-2 layers (64, 128, 256), then 4×4 stride-1 layers with
    /// 512 and 1 channels, all padded by 1: a 70×70 receptive field.
    fn default() -> Self {
        Self::scaled(64)
    }
}

impl PatchDiscriminatorSpec {
    /// The default layout with channel widths `base, 2·base, 4·base, 8·base, 1`.
    pub fn scaled(base: usize) -> Self {
        let l = |stride, channels| DiscLayerSpec { kernel: 4, stride, channels };
        Self {
            layers: vec![l(2, base), l(2, base * 2), l(2, base * 4), l(1, base * 8), l(1, 1)],
            pad: 1,
            in_channels: 4,
            use_spectral_norm: true,
        }
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(&self.kernel_strides())
    }

    pub fn kernel_strides(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.kernel, l.stride)).collect()
    }

    /// Score-map extent for a square input of extent `n`.
    pub fn output_size(&self, n: usize) -> Option<usize> {
        self.layers.iter().try_fold(n, |n, l| {
            (n + 2 * self.pad >= l.kernel).then(|| (n + 2 * self.pad - l.kernel) / l.stride + 1)
        })
    }

    /// Inclusive input-coordinate range seen by score cell `i` along one axis
    /// (may extend into the zero padding).
    pub fn cell_window(&self, i: usize) -> (isize, isize) {
        let mut jump = 1isize;
        let mut offset = 0isize;
        for l in &self.layers {
            offset += self.pad as isize * jump;
            jump *= l.stride as isize;
        }
        let start = i as isize * jump - offset;
        (start, start + self.receptive_field() as isize - 1)
    }
}

/// Receptive field of one output unit of a convolution stack, via the
/// backward recurrence `r ← stride·(r − 1) + kernel` starting from `r = 1`.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    layers
        .iter()
        .rev()
        .fold(1, |r, &(kernel, stride)| stride * (r - 1) + kernel)
}

/// Scores overlapping (RGB, depth) patches as real or synthetic.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub spec: PatchDiscriminatorSpec,
    pub store: ParamStore,
    pub layers: Vec<Layer>,
}

impl PatchDiscriminator {
    pub fn new(spec: PatchDiscriminatorSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::config("discriminator needs at least one layer"));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut in_ch = spec.in_channels;
        for (i, l) in spec.layers.iter().enumerate() {
            layers.push(Layer::conv(
                &mut store,
                &format!("disc{i}"),
                in_ch,
                l.channels,
                l.kernel,
                l.stride,
                spec.pad,
                spec.use_spectral_norm,
                rng,
            )?);
            in_ch = l.channels;
        }
        Ok(Self { spec, store, layers })
    }

    /// Score map in `(0, 1)` for a channel-concatenated RGB+depth pair.
    pub fn forward(&self, g: &mut Graph, pair: Var, frozen: bool) -> Result<Var> {
        let c = g.value(pair).dims3()?.0;
        if c != self.spec.in_channels {
            return Err(Error::Dimension {
                op: "discriminator",
                axis: "channel",
                expected: self.spec.in_channels,
                actual: c,
            });
        }
        let last = self.layers.len() - 1;
        let mut x = pair;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, &self.store, x, frozen)?;
            let act = if i == last {
                Activation::Sigmoid
            } else {
                Activation::LeakyRelu(LEAKY_SLOPE)
            };
            x = g.activation(x, act)?;
        }
        Ok(x)
    }

    /// Conditions on `rgb` by concatenating it with `depth` along channels.
    pub fn forward_pair(&self, g: &mut Graph, rgb: Var, depth: Var, frozen: bool) -> Result<Var> {
        let pair = g.concat_channels(rgb, depth)?;
        self.forward(g, pair, frozen)
    }

    /// Plain evaluation on tensors.
    pub fn score(&self, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let pair = g.constant(concat_channels(rgb, depth)?);
        let s = self.forward(&mut g, pair, true)?;
        Ok(g.value(s).clone())
    }

    pub fn advance_spectral(&mut self) -> Result<()> {
        for l in &mut self.layers {
            l.advance_spectral(&self.store)?;
        }
        Ok(())
    }
}
