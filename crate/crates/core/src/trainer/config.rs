//! Training hyperparameters and their flat `key = value` text form.

use std::fmt::Write as _;

use crate::crf::{CrfGeneratorSpec, SegmentMethod};
use crate::error::{Error, Result};
use crate::losses::AdversarialForm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    UNet,
    CnnCrf,
}

impl GeneratorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorKind::UNet => "unet",
            GeneratorKind::CnnCrf => "cnn_crf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(GeneratorKind::UNet),
            "cnn_crf" => Ok(GeneratorKind::CnnCrf),
            _ => Err(Error::config(format!("unknown generator `{s}` (expected unet or cnn_crf)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub base_lr: f64,
    pub disc_lr_multiplier: f64,
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    pub buffer_capacity: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub generator: GeneratorKind,
    pub input_size: usize,
    pub g_base_channels: usize,
    pub d_base_channels: usize,
    pub dropout_p: f64,
    pub g_spectral_norm: bool,
    pub d_spectral_norm: bool,
    pub instance_norm: bool,
    /// Off turns training into plain L1 regression.
    pub adversarial: bool,
    pub adversarial_form: AdversarialForm,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub d_min: f64,
    pub d_max: f64,
    /// Random flips, plus random crops when samples exceed `input_size`.
    pub augment: bool,
    pub crf: CrfGeneratorSpec,
    /// Weight μ of the per-node CRF NLL in the generator objective.
    pub crf_nll_weight: f64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for GanConfig {
    /// Desk-scale defaults: the published schedule and stabilisers on 64×64
    /// inputs with narrow networks.
    fn default() -> Self {
        Self {
            base_lr: 2e-4,
            disc_lr_multiplier: 4.0,
            epochs_constant: 150,
            epochs_decay: 150,
            buffer_capacity: 50,
            lambda: 100.0,
            batch_size: 4,
            seed: 0,
            generator: GeneratorKind::UNet,
            input_size: 64,
            g_base_channels: 8,
            d_base_channels: 8,
            dropout_p: 0.5,
            g_spectral_norm: true,
            d_spectral_norm: true,
            instance_norm: false,
            adversarial: true,
            adversarial_form: AdversarialForm::NonSaturating,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            d_min: crate::data::DEFAULT_D_MIN,
            d_max: crate::data::DEFAULT_D_MAX,
            augment: true,
            crf: CrfGeneratorSpec::default(),
            crf_nll_weight: 1.0,
            checkpoint_every: 10,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("{key}: cannot parse `{v}`")))
}

impl GanConfig {
    /// Full-size architecture: 256×256 inputs and 64-channel base widths.
    pub fn full_scale() -> Self {
        Self {
            input_size: 256,
            g_base_channels: 64,
            d_base_channels: 64,
            ..Self::default()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("disc_lr_multiplier", self.disc_lr_multiplier),
            ("lambda", self.lambda),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("{k} must be positive, got {v}")));
        }
        if self.buffer_capacity < 1 || self.batch_size < 1 {
            return Err(Error::config("buffer_capacity and batch_size must be at least 1"));
        }
        if self.total_epochs() == 0 {
            return Err(Error::config("at least one epoch is required"));
        }
        if self.g_base_channels == 0 || self.d_base_channels == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("dropout_p must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("ADAM betas must lie in [0, 1)"));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return Err(Error::config("depth range must satisfy 0 < d_min < d_max"));
        }
        if self.crf_nll_weight < 0.0 {
            return Err(Error::config("crf_nll_weight must be nonnegative"));
        }
        if self.generator == GeneratorKind::UNet {
            crate::nets::UNetSpec::new(self.input_size, self.g_base_channels).validate()?;
        } else {
            self.crf.validate()?;
        }
        Ok(())
    }

    /// Generator learning rate and discriminator learning rate for `epoch`:
    /// constant for `epochs_constant` epochs, then linear to zero over
    /// `epochs_decay` more.
    pub fn lr_at_epoch(&self, epoch: usize) -> Result<(f64, f64)> {
        lr_at_epoch(self, epoch)
    }

    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "base_lr" => self.base_lr = parse_num(key, v)?,
            "disc_lr_multiplier" => self.disc_lr_multiplier = parse_num(key, v)?,
            "epochs_constant" => self.epochs_constant = parse_num(key, v)?,
            "epochs_decay" => self.epochs_decay = parse_num(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "generator" => self.generator = GeneratorKind::parse(v)?,
            "input_size" => self.input_size = parse_num(key, v)?,
            "g_base_channels" => self.g_base_channels = parse_num(key, v)?,
            "d_base_channels" => self.d_base_channels = parse_num(key, v)?,
            "dropout_p" => self.dropout_p = parse_num(key, v)?,
            "g_spectral_norm" => self.g_spectral_norm = parse_bool(key, v)?,
            "d_spectral_norm" => self.d_spectral_norm = parse_bool(key, v)?,
            "instance_norm" => self.instance_norm = parse_bool(key, v)?,
            "adversarial" => self.adversarial = parse_bool(key, v)?,
            "adversarial_form" => {
                self.adversarial_form = match v {
                    "nonsaturating" => AdversarialForm::NonSaturating,
                    "saturating" => AdversarialForm::Saturating,
                    _ => return Err(Error::config(format!("{key}: expected nonsaturating or saturating"))),
                }
            }
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "d_min" => self.d_min = parse_num(key, v)?,
            "d_max" => self.d_max = parse_num(key, v)?,
            "augment" => self.augment = parse_bool(key, v)?,
            "crf_patch_size" => self.crf.patch_size = parse_num(key, v)?,
            "crf_superpixels" => self.crf.superpixels = parse_num(key, v)?,
            "crf_segmentation" => {
                self.crf.method = match v {
                    "grid" => SegmentMethod::Grid,
                    "slic" => SegmentMethod::Slic { compactness: 0.1, iterations: 10 },
                    _ => return Err(Error::config(format!("{key}: expected grid or slic"))),
                }
            }
            "crf_sigma1" => self.crf.sigma[0] = parse_num(key, v)?,
            "crf_sigma2" => self.crf.sigma[1] = parse_num(key, v)?,
            "crf_base_channels" => self.crf.base_channels = parse_num(key, v)?,
            "crf_beta1_init" => self.crf.beta_init[0] = parse_num(key, v)?,
            "crf_beta2_init" => self.crf.beta_init[1] = parse_num(key, v)?,
            "crf_lambda1" => self.crf.lambda1 = parse_num(key, v)?,
            "crf_lambda2" => self.crf.lambda2 = parse_num(key, v)?,
            "crf_nll_weight" => self.crf_nll_weight = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as `key = value` lines, in a fixed order; parsing the text
    /// back yields the same config.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to String");
        kv("base_lr", self.base_lr.to_string());
        kv("disc_lr_multiplier", self.disc_lr_multiplier.to_string());
        kv("epochs_constant", self.epochs_constant.to_string());
        kv("epochs_decay", self.epochs_decay.to_string());
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("lambda", self.lambda.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("generator", self.generator.as_str().to_string());
        kv("input_size", self.input_size.to_string());
        kv("g_base_channels", self.g_base_channels.to_string());
        kv("d_base_channels", self.d_base_channels.to_string());
        kv("dropout_p", self.dropout_p.to_string());
        kv("g_spectral_norm", self.g_spectral_norm.to_string());
        kv("d_spectral_norm", self.d_spectral_norm.to_string());
        kv("instance_norm", self.instance_norm.to_string());
        kv("adversarial", self.adversarial.to_string());
        kv(
            "adversarial_form",
            match self.adversarial_form {
                AdversarialForm::NonSaturating => "nonsaturating",
                AdversarialForm::Saturating => "saturating",
            }
            .to_string(),
        );
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("d_min", self.d_min.to_string());
        kv("d_max", self.d_max.to_string());
        kv("augment", self.augment.to_string());
        kv("crf_patch_size", self.crf.patch_size.to_string());
        kv("crf_superpixels", self.crf.superpixels.to_string());
        kv(
            "crf_segmentation",
            match self.crf.method {
                SegmentMethod::Grid => "grid",
                SegmentMethod::Slic { .. } => "slic",
            }
            .to_string(),
        );
        kv("crf_sigma1", self.crf.sigma[0].to_string());
        kv("crf_sigma2", self.crf.sigma[1].to_string());
        kv("crf_base_channels", self.crf.base_channels.to_string());
        kv("crf_beta1_init", self.crf.beta_init[0].to_string());
        kv("crf_beta2_init", self.crf.beta_init[1].to_string());
        kv("crf_lambda1", self.crf.lambda1.to_string());
        kv("crf_lambda2", self.crf.lambda2.to_string());
        kv("crf_nll_weight", self.crf_nll_weight.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }

    /// Applies `key = value` lines (`#` starts a comment) on top of `self`.
    /// Keys not in `extra` and not config fields are rejected; pairs whose key
    /// is in `extra` are returned for the caller.
    pub fn apply_kv_text(&mut self, text: &str, extra: &[&str]) -> Result<Vec<(String, String)>> {
        let mut rest = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if extra.contains(&k) {
                rest.push((k.to_string(), v.to_string()));
            } else {
                self.set(k, v).map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
            }
        }
        Ok(rest)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv_text(text, &[])?;
        Ok(c)
    }

    /// FNV-1a over the fields that determine parameter shapes and names, so
    /// checkpoints refuse to load into a different architecture.
    pub fn architecture_hash(&self) -> u64 {
        let mut text = format!(
            "generator={};input_size={};g_base={};g_sn={};",
            self.generator.as_str(),
            self.input_size,
            self.g_base_channels,
            self.g_spectral_norm,
        );
        write!(text, "d_base={};d_sn={};", self.d_base_channels, self.d_spectral_norm).expect("write to String");
        if self.generator == GeneratorKind::CnnCrf {
            write!(text, "crf_patch={};crf_base={};", self.crf.patch_size, self.crf.base_channels)
                .expect("write to String");
        }
        fnv1a(text.as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// `(g_lr, d_lr)` for a zero-based epoch.
pub fn lr_at_epoch(config: &GanConfig, epoch: usize) -> Result<(f64, f64)> {
    let total = config.total_epochs();
    if epoch >= total {
        return Err(Error::config(format!("epoch {epoch} outside schedule of {total} epochs")));
    }
    let g = if epoch < config.epochs_constant {
        config.base_lr
    } else {
        let into = (epoch - config.epochs_constant) as f64;
        config.base_lr * (1.0 - into / config.epochs_decay as f64)
    };
    Ok((g, g * config.disc_lr_multiplier))
}
