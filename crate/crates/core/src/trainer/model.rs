use rand::Rng;

use super::config::{GanConfig, GeneratorKind};
use crate::crf::{CrfForward, CrfGenerator};
use crate::error::Result;
use crate::nets::{Layer, PatchDiscriminator, PatchDiscriminatorSpec, UNet, UNetSpec};
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};

/// Either generator architecture behind one interface.
#[derive(Clone, Debug)]
pub enum Generator {
    UNet(UNet),
    Crf(CrfGenerator),
}

/// One generator pass on the tape.
pub struct GeneratorOutput {
    /// `[1, H, W]` depth in `[−1, 1]`.
    pub depth: Var,
    /// CRF intermediates, for the NLL term.
    pub crf: Option<CrfForward>,
}

impl Generator {
    pub fn new(config: &GanConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(match config.generator {
            GeneratorKind::UNet => {
                let mut spec = UNetSpec::new(config.input_size, config.g_base_channels);
                spec.bottleneck_dropout_p = config.dropout_p;
                spec.use_spectral_norm = config.g_spectral_norm;
                spec.instance_norm = config.instance_norm;
                Generator::UNet(UNet::new(spec, rng)?)
            }
            GeneratorKind::CnnCrf => {
                let mut spec = config.crf.clone();
                spec.use_spectral_norm = config.g_spectral_norm;
                Generator::Crf(CrfGenerator::new(spec, rng)?)
            }
        })
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Generator::UNet(n) => &n.store,
            Generator::Crf(n) => &n.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Generator::UNet(n) => &mut n.store,
            Generator::Crf(n) => &mut n.store,
        }
    }

    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            Generator::UNet(n) => n.layers().collect(),
            Generator::Crf(n) => n.convs.iter().chain(std::iter::once(&n.head)).collect(),
        }
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        match self {
            Generator::UNet(n) => n.layers_mut().collect(),
            Generator::Crf(n) => n.convs.iter_mut().chain(std::iter::once(&mut n.head)).collect(),
        }
    }

    /// The store and the layers together, for code that edits both.
    pub fn parts_mut(&mut self) -> (&mut ParamStore, Vec<&mut Layer>) {
        match self {
            Generator::UNet(n) => (&mut n.store, n.encoders.iter_mut().chain(n.decoders.iter_mut()).collect()),
            Generator::Crf(n) => (&mut n.store, n.convs.iter_mut().chain(std::iter::once(&mut n.head)).collect()),
        }
    }

    pub fn forward(&self, g: &mut Graph, rgb: Var, mode: Mode, rng: &mut impl Rng) -> Result<GeneratorOutput> {
        match self {
            Generator::UNet(n) => Ok(GeneratorOutput { depth: n.forward(g, rgb, mode, rng)?, crf: None }),
            Generator::Crf(n) => {
                let fwd = n.forward_detailed(g, rgb, false)?;
                Ok(GeneratorOutput { depth: fwd.dense, crf: Some(fwd) })
            }
        }
    }

    /// Eval-mode prediction in `[−1, 1]` for a normalised `[3, S, S]` image.
    pub fn predict(&self, rgb: &Tensor) -> Result<Tensor> {
        match self {
            Generator::UNet(n) => n.predict(rgb),
            Generator::Crf(n) => n.predict(rgb),
        }
    }

    pub fn advance_spectral(&mut self) -> Result<()> {
        match self {
            Generator::UNet(n) => n.advance_spectral(),
            Generator::Crf(n) => n.advance_spectral(),
        }
    }

    /// Post-update constraints (nonnegative CRF weights).
    pub fn project(&mut self) {
        if let Generator::Crf(n) = self {
            n.project_beta();
        }
    }

    pub fn as_crf(&self) -> Option<&CrfGenerator> {
        match self {
            Generator::Crf(n) => Some(n),
            Generator::UNet(_) => None,
        }
    }
}

pub fn build_discriminator(config: &GanConfig, rng: &mut impl Rng) -> Result<PatchDiscriminator> {
    let mut spec = PatchDiscriminatorSpec::scaled(config.d_base_channels);
    spec.use_spectral_norm = config.d_spectral_norm;
    PatchDiscriminator::new(spec, rng)
}
