use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::checkpoint::checkpoint_save;
use super::config::GanConfig;
use super::model::Generator;
use super::state::{EpochRecord, TrainState};
use crate::data::{augment, denormalize_depth, normalize_input, resize_sample, DepthSample, NormalizedPair};
use crate::error::{Error, Result};
use crate::metrics::{valid_mask, MetricsAccumulator, MetricsReport};
use crate::nets::Layer;

pub const LOSS_CSV_HEADER: &str = "epoch,step,d_loss,g_adv,g_l1,g_total,rel,rms,log10,d1,d2,d3";
const CRF_CSV_HEADER: &str = "epoch,nll,beta1,beta2";
const SPECTRAL_CSV_HEADER: &str = "epoch,sigma_min,sigma_max";

/// Training and held-out samples in metric units.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<DepthSample>,
    pub test: Vec<DepthSample>,
}

fn fit(sample: &DepthSample, size: usize) -> Result<DepthSample> {
    if sample.height() == size && sample.width() == size {
        Ok(sample.clone())
    } else {
        resize_sample(sample, size, size)
    }
}

/// Pooled metrics of the generator over `samples`, plus one report per
/// sample. Inputs are resized to the model size; predictions are
/// denormalised before comparison. `cap` drops ground truth beyond it.
pub fn evaluate_samples(
    generator: &Generator,
    config: &GanConfig,
    samples: &[DepthSample],
    cap: Option<f64>,
) -> Result<(MetricsReport, Vec<MetricsReport>)> {
    let mut pooled = MetricsAccumulator::new();
    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let s = fit(s, config.input_size)?;
        let x = normalize_input(&s, config.d_min, config.d_max)?;
        let pred = denormalize_depth(&generator.predict(&x.rgb)?, config.d_min, config.d_max);
        let mask = valid_mask(&s.depth, cap);
        let mut one = MetricsAccumulator::new();
        one.add(&pred, &s.depth, Some(&mask))?;
        pooled.add(&pred, &s.depth, Some(&mask))?;
        per_sample.push(one.finish()?);
    }
    if pooled.clamped() > 0 {
        log::warn!("{} predictions clamped before log metrics", pooled.clamped());
    }
    Ok((pooled.finish()?, per_sample))
}

pub fn evaluate(generator: &Generator, config: &GanConfig, samples: &[DepthSample]) -> Result<MetricsReport> {
    Ok(evaluate_samples(generator, config, samples, None)?.0)
}

fn layer_sigma(layer: &Layer, store: &crate::tensor::ParamStore) -> Result<f64> {
    let w = layer.effective_weight(store)?;
    let rows = w.shape()[0];
    let m = DMatrix::from_row_slice(rows, w.len() / rows, w.data());
    Ok(m.singular_values().max())
}

/// Largest singular value, by full SVD, of every spectrally normalised
/// weight as used in the forward pass.
pub fn spectral_sigmas(state: &TrainState) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for l in state.generator.layers() {
        if l.spectral.is_some() {
            out.push((format!("g.{}", l.name), layer_sigma(l, state.generator.store())?));
        }
    }
    for l in &state.discriminator.layers {
        if l.spectral.is_some() {
            out.push((format!("d.{}", l.name), layer_sigma(l, &state.discriminator.store)?));
        }
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One line of the loss CSV; absent values are empty fields.
pub fn loss_csv_row(r: &EpochRecord) -> String {
    let m = r.metrics.as_ref();
    let f = |get: fn(&MetricsReport) -> f64| fmt_opt(m.map(get));
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.epoch,
        r.step,
        fmt_opt(r.d_loss),
        r.g_adv,
        r.g_l1,
        r.g_total,
        f(|m| m.rel),
        f(|m| m.rms),
        f(|m| m.log10),
        f(|m| m.delta1),
        f(|m| m.delta2),
        f(|m| m.delta3),
    )
}

struct Logs {
    losses: File,
    crf: Option<File>,
    spectral: Option<File>,
}

fn open_log(dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<File> {
    let path = dir.join(name);
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))
}

fn append(f: &mut File, line: &str, dir: &Path) -> Result<()> {
    writeln!(f, "{line}").map_err(|e| Error::io(dir, e))
}

fn crf_row(r: &EpochRecord) -> Option<String> {
    let b = r.beta?;
    Some(format!("{},{},{},{}", r.epoch, fmt_opt(r.crf_nll), b[0], b[1]))
}

/// Knobs for [`train_loop`].
#[derive(Clone, Debug, Default)]
pub struct LoopOptions<'a> {
    /// Where CSV logs and checkpoints go; nothing is written without it.
    pub run_dir: Option<&'a Path>,
    /// Stop before this epoch instead of at the end of the schedule.
    pub stop_at: Option<usize>,
    /// Record the SVD σ range of normalised weights after each epoch.
    pub log_spectral: bool,
}

/// Runs epochs from `state.epoch` to the end of the schedule (or
/// `opts.stop_at`). Each epoch shuffles the training set with the state's
/// rng, steps through it in batches, then evaluates on the test split.
/// Logs are rewritten from the state's history at the start, so a resumed
/// run's CSV matches an uninterrupted one.
pub fn train_loop(state: &mut TrainState, data: &Dataset, opts: &LoopOptions<'_>) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let end = opts.stop_at.unwrap_or(usize::MAX).min(state.config.total_epochs());
    let sn = state.config.g_spectral_norm || state.config.d_spectral_norm;
    let mut logs = match opts.run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let rows: Vec<String> = state.history.iter().map(loss_csv_row).collect();
            let losses = open_log(dir, "losses.csv", LOSS_CSV_HEADER, &rows)?;
            let crf = if state.generator.as_crf().is_some() {
                let rows: Vec<String> = state.history.iter().filter_map(crf_row).collect();
                Some(open_log(dir, "crf_log.csv", CRF_CSV_HEADER, &rows)?)
            } else {
                None
            };
            let spectral = if opts.log_spectral && sn {
                // σ values are not in the history; keep rows of epochs already run
                let old = std::fs::read_to_string(dir.join("spectral_log.csv")).unwrap_or_default();
                let rows: Vec<String> = old
                    .lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < state.epoch))
                    .map(str::to_string)
                    .collect();
                Some(open_log(dir, "spectral_log.csv", SPECTRAL_CSV_HEADER, &rows)?)
            } else {
                None
            };
            Some(Logs { losses, crf, spectral })
        }
        None => None,
    };

    while state.epoch < end {
        let record = train_epoch(state, data)?;
        log::info!(
            "epoch {} step {} d_loss {} g_total {:.5} rel {}",
            record.epoch,
            record.step,
            fmt_opt(record.d_loss),
            record.g_total,
            fmt_opt(record.metrics.map(|m| m.rel)),
        );
        if let (Some(dir), Some(logs)) = (opts.run_dir, logs.as_mut()) {
            append(&mut logs.losses, &loss_csv_row(&record), dir)?;
            if let (Some(f), Some(row)) = (logs.crf.as_mut(), crf_row(&record)) {
                append(f, &row, dir)?;
            }
            if let Some(f) = logs.spectral.as_mut() {
                let sig = spectral_sigmas(state)?;
                let lo = sig.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
                let hi = sig.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                append(f, &format!("{},{lo},{hi}", record.epoch), dir)?;
            }
            let every = state.config.checkpoint_every;
            let done = state.epoch == end;
            if done || (every > 0 && state.epoch.is_multiple_of(every)) {
                checkpoint_save(state, &dir.join(format!("checkpoint_{:04}.bin", state.epoch)))?;
                checkpoint_save(state, &dir.join("checkpoint_last.bin"))?;
            }
        }
    }
    Ok(())
}

/// Prepares one training sample: augmentation (or a plain resize), then
/// normalisation to `[−1, 1]`.
fn prepare(state: &mut TrainState, sample: &DepthSample) -> Result<NormalizedPair> {
    let size = state.config.input_size;
    let s = if state.config.augment {
        let base = if sample.height() < size || sample.width() < size {
            resize_sample(sample, size, size)?
        } else {
            sample.clone()
        };
        augment(&base, &mut state.rng, size)?
    } else {
        fit(sample, size)?
    };
    normalize_input(&s, state.config.d_min, state.config.d_max)
}

/// One pass over the training set followed by held-out evaluation.
pub fn train_epoch(state: &mut TrainState, data: &Dataset) -> Result<EpochRecord> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    state.shuffle(&mut order);
    let b = state.config.batch_size;
    let (mut d_sum, mut adv, mut l1, mut total, mut nll) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut has_d, mut has_nll) = (false, false);
    let mut steps = 0usize;
    for chunk in order.chunks(b) {
        let batch = chunk
            .iter()
            .map(|&i| prepare(state, &data.train[i]))
            .collect::<Result<Vec<_>>>()?;
        let r = state.train_step(&batch)?;
        if let Some(d) = r.losses.d_loss {
            d_sum += d;
            has_d = true;
        }
        if let Some(n) = r.crf_nll {
            nll += n;
            has_nll = true;
        }
        adv += r.losses.g_adv_loss;
        l1 += r.losses.g_l1_loss;
        total += r.losses.g_total;
        steps += 1;
    }
    let n = steps as f64;
    let metrics = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(&state.generator, &state.config, &data.test)?)
    };
    let record = EpochRecord {
        epoch: state.epoch,
        step: state.step,
        d_loss: has_d.then(|| d_sum / n),
        g_adv: adv / n,
        g_l1: l1 / n,
        g_total: total / n,
        crf_nll: has_nll.then(|| nll / n),
        beta: state.generator.as_crf().map(|c| c.beta_values()),
        metrics,
    };
    state.history.push(record);
    state.epoch += 1;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;
    use crate::trainer::checkpoint_load;

    fn tiny() -> GanConfig {
        GanConfig {
            input_size: 32,
            g_base_channels: 2,
            d_base_channels: 2,
            epochs_constant: 2,
            epochs_decay: 2,
            buffer_capacity: 3,
            batch_size: 2,
            checkpoint_every: 1,
            ..GanConfig::default()
        }
    }

    fn data(n_train: usize, n_test: usize) -> Dataset {
        let s = |i: u64| synth_scene(i, 40, 3, 0.5, 10.0);
        Dataset {
            train: (0..n_train as u64).map(s).collect(),
            test: (100..100 + n_test as u64).map(s).collect(),
        }
    }

    #[test]
    fn smoke_run_has_finite_losses() {
        let mut st = TrainState::new(GanConfig { epochs_constant: 1, epochs_decay: 1, ..tiny() }).unwrap();
        train_loop(&mut st, &data(8, 2), &LoopOptions::default()).unwrap();
        assert_eq!(st.history.len(), 2);
        for r in &st.history {
            assert!(r.d_loss.unwrap().is_finite() && r.g_total.is_finite());
            assert!(r.metrics.unwrap().is_finite());
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let d = data(6, 2);
        let dir = tempfile::tempdir().unwrap();
        let full_dir = dir.path().join("full");
        let mut full = TrainState::new(tiny()).unwrap();
        train_loop(&mut full, &d, &LoopOptions { run_dir: Some(&full_dir), ..Default::default() }).unwrap();

        let part_dir = dir.path().join("part");
        let mut part = TrainState::new(tiny()).unwrap();
        train_loop(&mut part, &d, &LoopOptions { run_dir: Some(&part_dir), stop_at: Some(2), ..Default::default() })
            .unwrap();
        drop(part);
        let mut resumed = checkpoint_load(&part_dir.join("checkpoint_0002.bin"), Some(&tiny())).unwrap();
        assert_eq!(resumed.epoch, 2);
        train_loop(&mut resumed, &d, &LoopOptions { run_dir: Some(&part_dir), ..Default::default() }).unwrap();

        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.generator.store().flat_values(), full.generator.store().flat_values());
        let csv = |p: &Path| std::fs::read_to_string(p.join("losses.csv")).unwrap();
        assert_eq!(csv(&part_dir), csv(&full_dir));
    }

    #[test]
    fn ablation_csv_has_empty_d_loss() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GanConfig { adversarial: false, epochs_constant: 1, epochs_decay: 1, ..tiny() };
        let mut st = TrainState::new(cfg).unwrap();
        train_loop(&mut st, &data(4, 1), &LoopOptions { run_dir: Some(dir.path()), ..Default::default() }).unwrap();
        let text = std::fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(LOSS_CSV_HEADER));
        for line in lines {
            assert_eq!(line.split(',').nth(2), Some(""), "{line}");
        }
    }

    #[test]
    fn spectral_log_stays_near_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = TrainState::new(GanConfig { epochs_constant: 1, epochs_decay: 1, ..tiny() }).unwrap();
        let opts = LoopOptions { run_dir: Some(dir.path()), log_spectral: true, ..Default::default() };
        train_loop(&mut st, &data(4, 1), &opts).unwrap();
        for (name, s) in spectral_sigmas(&st).unwrap() {
            assert!((0.9..=1.1).contains(&s), "{name}: {s}");
        }
        let text = std::fs::read_to_string(dir.path().join("spectral_log.csv")).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn csv_row_fields() {
        let r = EpochRecord {
            epoch: 3,
            step: 12,
            d_loss: None,
            g_adv: 0.0,
            g_l1: 0.25,
            g_total: 25.0,
            crf_nll: None,
            beta: None,
            metrics: None,
        };
        assert_eq!(loss_csv_row(&r), "3,12,,0,0.25,25,,,,,,");
    }
}
