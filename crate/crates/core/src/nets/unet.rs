use rand::Rng;

use super::layer::Layer;
use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, Mode, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetSpec {
    /// Square input extent; must be a power of two in `16..=256`.
    pub input_size: usize,
    pub base_channels: usize,
    /// Channel cap, 8× the base by default (64 → 512).
    pub max_channels: usize,
    pub bottleneck_dropout_p: f64,
    pub use_spectral_norm: bool,
    pub instance_norm: bool,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self::new(256, 64)
    }
}

impl UNetSpec {
    pub fn new(input_size: usize, base_channels: usize) -> Self {
        Self {
            input_size,
            base_channels,
            max_channels: base_channels * 8,
            bottleneck_dropout_p: 0.5,
            use_spectral_norm: true,
            instance_norm: false,
        }
    }

    /// Number of stride-2 stages, `log2(input_size)`.
    pub fn depth(&self) -> usize {
        self.input_size.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_power_of_two() || !(16..=256).contains(&self.input_size) {
            return Err(Error::config(format!(
                "U-Net input size must be a power of two in 16..=256, got {}",
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::config("U-Net channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.bottleneck_dropout_p) {
            return Err(Error::config("bottleneck dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Output channels of encoder stage `i` (0-based).
    pub fn encoder_channels(&self, i: usize) -> usize {
        (self.base_channels << i.min(16)).min(self.max_channels)
    }
}

/// Knobs for inspecting a forward pass.
#[derive(Clone, Debug, Default)]
pub struct UNetForwardOptions {
    /// Replace the skip tensor from encoder stage `i` with zeros.
    pub zero_skip: Option<usize>,
    /// Treat parameters as constants.
    pub frozen: bool,
}

/// Encoder-decoder generator with skip connections: 4×4 stride-2 convolutions
/// down to a 1×1 bottleneck, 4×4 stride-2 transposed convolutions back up.
#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: UNetSpec,
    pub store: ParamStore,
    pub encoders: Vec<Layer>,
    pub decoders: Vec<Layer>,
}

impl UNet {
    pub fn new(spec: UNetSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let depth = spec.depth();
        let sn = spec.use_spectral_norm;
        let mut store = ParamStore::new();
        let mut encoders = Vec::with_capacity(depth);
        let mut in_ch = 3;
        for i in 0..depth {
            let out = spec.encoder_channels(i);
            encoders.push(Layer::conv(&mut store, &format!("enc{i}"), in_ch, out, 4, 2, 1, sn, rng)?);
            in_ch = out;
        }
        // decoders[j] produces the resolution of encoder stage j−1 (the image for j = 0)
        let mut decoders = Vec::with_capacity(depth);
        for j in (0..depth).rev() {
            let input = if j == depth - 1 {
                spec.encoder_channels(j)
            } else {
                spec.encoder_channels(j) * 2
            };
            let out = if j == 0 { 1 } else { spec.encoder_channels(j - 1) };
            decoders.push(Layer::conv_transpose(&mut store, &format!("dec{j}"), input, out, 4, 2, 1, sn, rng)?);
        }
        decoders.reverse();
        Ok(Self {
            spec,
            store,
            encoders,
            decoders,
        })
    }

    pub fn depth(&self) -> usize {
        self.encoders.len()
    }

    /// Input channels of each decoder stage, innermost first.
    pub fn decoder_input_channels(&self) -> Vec<usize> {
        self.decoders
            .iter()
            .rev()
            .map(|d| d.weight_shape(&self.store)[0])
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, rgb: Var, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        self.forward_with(g, rgb, mode, rng, &UNetForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        g: &mut Graph,
        rgb: Var,
        mode: Mode,
        rng: &mut impl Rng,
        opts: &UNetForwardOptions,
    ) -> Result<Var> {
        let (c, h, w) = g.value(rgb).dims3()?;
        let s = self.spec.input_size;
        if c != 3 {
            return Err(Error::Dimension { op: "unet_forward", axis: "channel", expected: 3, actual: c });
        }
        if h != s {
            return Err(Error::Dimension { op: "unet_forward", axis: "height", expected: s, actual: h });
        }
        if w != s {
            return Err(Error::Dimension { op: "unet_forward", axis: "width", expected: s, actual: w });
        }
        let depth = self.depth();
        let norm = |g: &mut Graph, x: Var| -> Result<Var> {
            let (_, h, _) = g.value(x).dims3()?;
            if self.spec.instance_norm && h > 1 {
                g.instance_norm(x, 1e-5)
            } else {
                Ok(x)
            }
        };

        let mut skips = Vec::with_capacity(depth);
        let mut x = rgb;
        for (i, enc) in self.encoders.iter().enumerate() {
            x = enc.forward(g, &self.store, x, opts.frozen)?;
            if i > 0 && i + 1 < depth {
                x = norm(g, x)?;
            }
            x = g.activation(x, Activation::LeakyRelu(LEAKY_SLOPE))?;
            skips.push(x);
        }

        for j in (0..depth).rev() {
            let input = if j == depth - 1 {
                x
            } else {
                let mut skip = skips[j];
                if opts.zero_skip == Some(j) {
                    skip = g.constant(Tensor::zeros(g.value(skip).shape()));
                }
                g.concat_channels(x, skip)?
            };
            x = self.decoders[j].forward(g, &self.store, input, opts.frozen)?;
            if j == 0 {
                x = g.activation(x, Activation::Tanh)?;
            } else {
                x = norm(g, x)?;
                x = g.activation(x, Activation::Relu)?;
                if j == depth - 1 {
                    x = g.dropout(x, self.spec.bottleneck_dropout_p, mode, rng)?;
                }
            }
        }
        Ok(x)
    }

    /// Eval-mode prediction on a normalised `[3, S, S]` image.
    pub fn predict(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(rgb.clone());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let y = self.forward_with(&mut g, x, Mode::Eval, &mut rng, &UNetForwardOptions { frozen: true, ..Default::default() })?;
        Ok(g.value(y).clone())
    }

    pub fn advance_spectral(&mut self) -> Result<()> {
        for l in self.encoders.iter_mut().chain(self.decoders.iter_mut()) {
            l.advance_spectral(&self.store)?;
        }
        Ok(())
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoders.iter().chain(self.decoders.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.encoders.iter_mut().chain(self.decoders.iter_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(size: usize) -> UNet {
        let mut spec = UNetSpec::new(size, 4);
        spec.max_channels = 16;
        UNet::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn stage_counts() {
        let mut spec = UNetSpec::new(256, 2);
        spec.use_spectral_norm = false;
        let net = UNet::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.depth(), 8);
        assert_eq!(small(64).depth(), 6);
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(UNet::new(UNetSpec::new(48, 4), &mut rng), Err(Error::Config(_))));
        assert!(matches!(UNet::new(UNetSpec::new(8, 4), &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn output_shape_and_range() {
        let net = small(64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[3, 64, 64], |_| rng.random_range(-1.0..1.0));
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), &[1, 64, 64]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(net.predict(&x).unwrap(), y);
    }

    #[test]
    fn wrong_size_is_dimension_error() {
        let net = small(32);
        let x = Tensor::zeros(&[3, 16, 16]);
        assert!(matches!(net.predict(&x), Err(Error::Dimension { axis: "height", .. })));
    }

    #[test]
    fn decoder_inputs_are_previous_plus_skip() {
        let net = small(64);
        let inputs = net.decoder_input_channels();
        let depth = net.depth();
        assert_eq!(inputs[0], net.spec.encoder_channels(depth - 1));
        for (k, &c) in inputs.iter().enumerate().skip(1) {
            let j = depth - 1 - k;
            let prev_out = net.spec.encoder_channels(j);
            assert_eq!(c, prev_out + net.spec.encoder_channels(j));
        }
    }

    #[test]
    fn skips_are_live() {
        let net = small(32);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(&[3, 32, 32], |_| rng.random_range(-1.0..1.0));
        let base = net.predict(&x).unwrap();
        for j in 0..net.depth() - 1 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let opts = UNetForwardOptions { zero_skip: Some(j), frozen: true };
            let y = net.forward_with(&mut g, xv, Mode::Eval, &mut rng, &opts).unwrap();
            assert!(g.value(y).max_abs_diff(&base).unwrap() > 0.0, "skip {j} is dead");
        }
    }

    #[test]
    fn same_seed_same_parameter_count() {
        let a = small(64);
        let b = small(64);
        assert_eq!(a.store.scalar_count(), b.store.scalar_count());
        assert_eq!(a.store.flat_values(), b.store.flat_values());
    }
}
