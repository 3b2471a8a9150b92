use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::buffer::{buffer_exchange, FakePair, ReplayBuffer};
use super::config::GanConfig;
use super::model::{build_discriminator, Generator, GeneratorOutput};
use crate::data::NormalizedPair;
use crate::error::{Error, Result};
use crate::losses::{discriminator_loss_var, generator_adversarial_loss_var, l1_loss_var, LossBundle};
use crate::metrics::MetricsReport;
use crate::nets::PatchDiscriminator;
use crate::tensor::{Adam, Graph, Mode, Var};

pub const ADAM_EPS: f64 = 1e-8;

/// Losses of one step plus the CRF NLL when that generator is in use.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBundle,
    pub crf_nll: Option<f64>,
}

/// Per-epoch means of the step losses and held-out metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimiser steps completed at the end of the epoch.
    pub step: u64,
    pub d_loss: Option<f64>,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_total: f64,
    pub crf_nll: Option<f64>,
    pub beta: Option<[f64; 2]>,
    pub metrics: Option<MetricsReport>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: GanConfig,
    pub generator: Generator,
    pub discriminator: PatchDiscriminator,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

struct Pass {
    graph: Graph,
    rgb: Var,
    out: GeneratorOutput,
}

fn generator_pass(gen: &Generator, pair: &NormalizedPair, rng: &mut ChaCha8Rng) -> Result<Pass> {
    let mut graph = Graph::new();
    let rgb = graph.constant(pair.rgb.clone());
    let out = gen.forward(&mut graph, rgb, Mode::Train, rng)?;
    Ok(Pass { graph, rgb, out })
}

struct Objective {
    total: Var,
    adv: f64,
    l1: f64,
    nll: Option<f64>,
}

/// Adds `[adv] + λ·L1 [+ μ·NLL/g + reg]` to the pass graph. The discriminator
/// enters frozen so only the generator receives gradients.
fn generator_objective(
    config: &GanConfig,
    gen: &Generator,
    disc: &PatchDiscriminator,
    pass: &mut Pass,
    pair: &NormalizedPair,
    adversarial: bool,
) -> Result<Objective> {
    let g = &mut pass.graph;
    let target = g.constant(pair.depth.clone());
    let l1 = l1_loss_var(g, pass.out.depth, target)?;
    let l1_value = g.value(l1).data()[0];
    let mut total = g.scale(l1, config.lambda);
    let mut adv_value = 0.0;
    if adversarial {
        let score = disc.forward_pair(g, pass.rgb, pass.out.depth, true)?;
        let adv = generator_adversarial_loss_var(g, score, config.adversarial_form);
        adv_value = g.value(adv).data()[0];
        total = g.add(total, adv)?;
    }
    let mut nll = None;
    if let (Generator::Crf(net), Some(fwd)) = (gen, &pass.out.crf) {
        let n = net.nll_loss(g, fwd, &pair.depth)?;
        nll = Some(g.value(n).data()[0]);
        let weighted = g.scale(n, config.crf_nll_weight);
        total = g.add(total, weighted)?;
        let reg = net.regularizer(g)?;
        total = g.add(total, reg)?;
    }
    Ok(Objective { total, adv: adv_value, l1: l1_value, nll })
}

fn nan_abort(what: &str, bundle: &LossBundle) -> Error {
    Error::NanAbort(format!("{what}; last losses {bundle:?}"))
}

impl TrainState {
    /// Fresh networks and optimisers, all randomness drawn from `config.seed`.
    pub fn new(config: GanConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(&config, &mut rng)?;
        let discriminator = build_discriminator(&config, &mut rng)?;
        let g_opt = Adam::with_betas(generator.store(), config.adam_beta1, config.adam_beta2, ADAM_EPS);
        let d_opt = Adam::with_betas(&discriminator.store, config.adam_beta1, config.adam_beta2, ADAM_EPS);
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        Ok(Self {
            config,
            generator,
            discriminator,
            g_opt,
            d_opt,
            buffer,
            rng,
            epoch: 0,
            step: 0,
            history: Vec::new(),
        })
    }

    /// One discriminator update then one generator update on `batch`.
    pub fn train_step(&mut self, batch: &[NormalizedPair]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (g_lr, d_lr) = self.config.lr_at_epoch(self.epoch)?;
        let adversarial = self.config.adversarial;
        let inv_b = 1.0 / batch.len() as f64;

        let mut passes = batch
            .iter()
            .map(|p| generator_pass(&self.generator, p, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;

        let mut bundle = LossBundle {
            d_loss: None,
            g_adv_loss: 0.0,
            g_l1_loss: 0.0,
            g_total: 0.0,
            lambda: self.config.lambda,
        };

        if adversarial {
            let disc = &mut self.discriminator;
            disc.store.zero_grad();
            let mut d_sum = 0.0;
            for (pass, pair) in passes.iter().zip(batch) {
                let fresh = FakePair { rgb: pair.rgb.clone(), depth: pass.graph.value(pass.out.depth).clone() };
                let fake = buffer_exchange(&mut self.buffer, fresh, &mut self.rng);
                let mut g = Graph::new();
                let rgb = g.constant(pair.rgb.clone());
                let real = g.constant(pair.depth.clone());
                let s_real = disc.forward_pair(&mut g, rgb, real, false)?;
                let frgb = g.constant(fake.rgb);
                let fdepth = g.constant(fake.depth);
                let s_fake = disc.forward_pair(&mut g, frgb, fdepth, false)?;
                let loss = discriminator_loss_var(&mut g, s_real, s_fake)?;
                d_sum += g.value(loss).data()[0];
                disc.store.accumulate(&g.backward(loss)?);
            }
            bundle.d_loss = Some(d_sum * inv_b);
            if !bundle.is_finite() {
                return Err(nan_abort("discriminator loss", &bundle));
            }
            disc.store.scale_grad(inv_b);
            self.d_opt
                .step(&mut disc.store, d_lr)
                .map_err(|e| nan_abort(&e.to_string(), &bundle))?;
            disc.advance_spectral()?;
        }

        self.generator.store_mut().zero_grad();
        let mut nll_sum = None;
        for (pass, pair) in passes.iter_mut().zip(batch) {
            let obj = generator_objective(&self.config, &self.generator, &self.discriminator, pass, pair, adversarial)?;
            bundle.g_adv_loss += obj.adv * inv_b;
            bundle.g_l1_loss += obj.l1 * inv_b;
            bundle.g_total += pass.graph.value(obj.total).data()[0] * inv_b;
            if let Some(n) = obj.nll {
                *nll_sum.get_or_insert(0.0) += n * inv_b;
            }
            let grads = pass.graph.backward(obj.total)?;
            self.generator.store_mut().accumulate(&grads);
        }
        if !bundle.is_finite() || nll_sum.is_some_and(|n: f64| !n.is_finite()) {
            return Err(nan_abort("generator loss", &bundle));
        }
        let store = self.generator.store_mut();
        store.scale_grad(inv_b);
        self.g_opt
            .step(store, g_lr)
            .map_err(|e| nan_abort(&e.to_string(), &bundle))?;
        self.generator.advance_spectral()?;
        self.generator.project();
        self.step += 1;
        Ok(StepReport { losses: bundle, crf_nll: nll_sum })
    }

    /// Batch-mean gradient of the generator objective at the current state,
    /// flattened in parameter order. Nothing is mutated: dropout draws come
    /// from a copy of the training rng, so two calls see the same masks.
    pub fn generator_gradient(&self, batch: &[NormalizedPair], adversarial: bool) -> Result<Vec<f64>> {
        let mut rng = self.rng.clone();
        let mut gen = self.generator.clone();
        gen.store_mut().zero_grad();
        for pair in batch {
            let mut pass = generator_pass(&gen, pair, &mut rng)?;
            let obj = generator_objective(&self.config, &gen, &self.discriminator, &mut pass, pair, adversarial)?;
            let grads = pass.graph.backward(obj.total)?;
            gen.store_mut().accumulate(&grads);
        }
        gen.store_mut().scale_grad(1.0 / batch.len().max(1) as f64);
        Ok(gen.store().flat_grads())
    }

    /// Shuffles with the training rng so data order follows the run's seeded
    /// stream.
    pub(crate) fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}
