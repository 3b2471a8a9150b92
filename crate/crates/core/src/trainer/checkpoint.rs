//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ADVDCKPT" | u32 version | u64 architecture hash
//! u64 len, config text | u64 epoch | u64 step | u64 g_adam_step | u64 d_adam_step
//! u64 n_arrays, then per array: u64 name len, name, u64 ndim, ndim × u64 extents, f64 payload
//! rng: 32-byte seed, u64 stream, u128 word position
//! u64 FNV-1a checksum of everything above
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::buffer::{FakePair, ReplayBuffer};
use super::config::{fnv1a, GanConfig};
use super::state::{EpochRecord, TrainState};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::nets::Layer;
use crate::spectral_norm::SpectralState;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const RECORD_WIDTH: usize = 18;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn array(&mut self, name: &str, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("unexpected end of file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| corrupt(format!("implausible length {v}")))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }
    fn array(&mut self) -> Result<(String, Tensor)> {
        let name = String::from_utf8(self.bytes()?.to_vec()).map_err(|_| corrupt("array name is not UTF-8"))?;
        let ndim = self.len()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.len()?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&c| c.saturating_mul(8) <= self.buf.len())
            .ok_or_else(|| corrupt(format!("array `{name}` has implausible extents {shape:?}")))?;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        // history rows use NaN for absent values, so finiteness is checked per use
        Ok((name, Tensor::from_parts(shape, data)))
    }
}

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn unopt(v: f64) -> Option<f64> {
    (!v.is_nan()).then_some(v)
}

fn encode_record(r: &EpochRecord) -> [f64; RECORD_WIDTH] {
    let beta = r.beta.map(|b| (Some(b[0]), Some(b[1]))).unwrap_or((None, None));
    let m = r.metrics;
    let field = |f: fn(&MetricsReport) -> f64| m.as_ref().map(f);
    [
        r.epoch as f64,
        r.step as f64,
        opt(r.d_loss),
        r.g_adv,
        r.g_l1,
        r.g_total,
        opt(r.crf_nll),
        opt(beta.0),
        opt(beta.1),
        opt(field(|m| m.rel)),
        opt(field(|m| m.sq_rel)),
        opt(field(|m| m.log10)),
        opt(field(|m| m.rms)),
        opt(field(|m| m.rms_log)),
        opt(field(|m| m.delta1)),
        opt(field(|m| m.delta2)),
        opt(field(|m| m.delta3)),
        opt(field(|m| m.n_pixels as f64)),
    ]
}

fn decode_record(v: &[f64]) -> EpochRecord {
    let metrics = unopt(v[9]).map(|rel| MetricsReport {
        rel,
        sq_rel: v[10],
        log10: v[11],
        rms: v[12],
        rms_log: v[13],
        delta1: v[14],
        delta2: v[15],
        delta3: v[16],
        n_pixels: v[17] as usize,
    });
    EpochRecord {
        epoch: v[0] as usize,
        step: v[1] as u64,
        d_loss: unopt(v[2]),
        g_adv: v[3],
        g_l1: v[4],
        g_total: v[5],
        crf_nll: unopt(v[6]),
        beta: unopt(v[7]).map(|b0| [b0, v[8]]),
        metrics,
    }
}

fn write_network(w: &mut Vec<(String, Tensor)>, prefix: &str, store: &ParamStore, layers: &[&Layer]) {
    for p in store.iter() {
        w.push((format!("{prefix}.param.{}", p.name), p.value.clone()));
    }
    for l in layers {
        if let Some(s) = &l.spectral {
            w.push((format!("{prefix}.sn_u.{}", l.name), vector(s.u())));
            w.push((format!("{prefix}.sn_v.{}", l.name), vector(s.v())));
        }
    }
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("1-d shape matches data")
}

/// Serialises `state` to `path`, going through a temporary file so a failed
/// write never leaves a truncated checkpoint behind.
pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    write_network(&mut arrays, "g", state.generator.store(), &state.generator.layers());
    let d_layers: Vec<&Layer> = state.discriminator.layers.iter().collect();
    write_network(&mut arrays, "d", &state.discriminator.store, &d_layers);
    for (prefix, opt) in [("g", &state.g_opt), ("d", &state.d_opt)] {
        let (m, v) = opt.moments();
        for (i, (m, v)) in m.iter().zip(v).enumerate() {
            arrays.push((format!("{prefix}.adam_m.{i}"), m.clone()));
            arrays.push((format!("{prefix}.adam_v.{i}"), v.clone()));
        }
    }
    for (i, p) in state.buffer.stored().iter().enumerate() {
        arrays.push((format!("buffer.{i}.rgb"), p.rgb.clone()));
        arrays.push((format!("buffer.{i}.depth"), p.depth.clone()));
    }
    let hist: Vec<f64> = state.history.iter().flat_map(encode_record).collect();
    arrays.push(("history".into(), Tensor::from_parts(vec![state.history.len(), RECORD_WIDTH], hist)));

    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u64(state.config.architecture_hash());
    w.bytes(state.config.to_kv_text().as_bytes());
    w.u64(state.epoch as u64);
    w.u64(state.step);
    w.u64(state.g_opt.step_count());
    w.u64(state.d_opt.step_count());
    w.u64(arrays.len() as u64);
    for (name, t) in &arrays {
        w.array(name, t);
    }
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    let sum = fnv1a(&w.0);
    w.u64(sum);

    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &w.0).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take_array(arrays: &mut HashMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = arrays.remove(name).ok_or_else(|| corrupt(format!("missing array `{name}`")))?;
    if t.shape() != shape {
        return Err(corrupt(format!("array `{name}` has shape {:?}, expected {shape:?}", t.shape())));
    }
    if !t.is_finite() {
        return Err(corrupt(format!("array `{name}` holds non-finite values")));
    }
    Ok(t)
}

fn restore_network(
    arrays: &mut HashMap<String, Tensor>,
    prefix: &str,
    store: &mut ParamStore,
    layers: Vec<&mut Layer>,
) -> Result<()> {
    for p in store.iter_mut() {
        p.value = take_array(arrays, &format!("{prefix}.param.{}", p.name), p.value.shape())?;
    }
    for l in layers {
        if let Some(s) = &mut l.spectral {
            let u = take_array(arrays, &format!("{prefix}.sn_u.{}", l.name), &[s.u().len()])?;
            let v = take_array(arrays, &format!("{prefix}.sn_v.{}", l.name), &[s.v().len()])?;
            *s = SpectralState::from_vectors(u.into_vec(), v.into_vec(), s.iterations_per_update);
        }
    }
    Ok(())
}

fn restore_adam(
    arrays: &mut HashMap<String, Tensor>,
    prefix: &str,
    opt: &mut crate::tensor::Adam,
    store: &ParamStore,
    step: u64,
) -> Result<()> {
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for (i, p) in store.iter().enumerate() {
        m.push(take_array(arrays, &format!("{prefix}.adam_m.{i}"), p.value.shape())?);
        v.push(take_array(arrays, &format!("{prefix}.adam_v.{i}"), p.value.shape())?);
    }
    opt.restore(step, m, v)
}

/// Reads the configuration embedded in a checkpoint without restoring state.
pub fn checkpoint_config(path: &Path) -> Result<GanConfig> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = header(&buf)?;
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| corrupt("config text is not UTF-8"))?;
    GanConfig::from_kv_text(text).map_err(|e| corrupt(format!("embedded config: {e}")))
}

/// Validates checksum, magic and version; returns a reader positioned after
/// the architecture hash. The hash itself is checked by the caller.
fn header(buf: &[u8]) -> Result<Reader<'_>> {
    if buf.len() < CHECKPOINT_MAGIC.len() + 4 + 8 + 8 {
        return Err(corrupt(format!("file too short ({} bytes)", buf.len())));
    }
    if &buf[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let mut r = Reader { buf, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(corrupt("checksum mismatch (truncated or modified file)"));
    }
    r.buf = body;
    r.u64()?;
    Ok(r)
}

/// Restores a training state. With `config` given, the checkpoint must have
/// been written by the same architecture and the given config is used for
/// the schedule; otherwise the embedded config is used. Nothing outside the
/// returned value is touched, so a failure leaves the caller's state intact.
pub fn checkpoint_load(path: &Path, config: Option<&GanConfig>) -> Result<TrainState> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = header(&buf)?;
    let found = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes"));
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| corrupt("config text is not UTF-8"))?;
    let embedded = GanConfig::from_kv_text(text).map_err(|e| corrupt(format!("embedded config: {e}")))?;
    if embedded.architecture_hash() != found {
        return Err(corrupt("embedded config does not match its hash"));
    }
    let config = match config {
        Some(c) => {
            let expected = c.architecture_hash();
            if expected != found {
                return Err(Error::ConfigMismatch { expected, found });
            }
            c.clone()
        }
        None => embedded,
    };
    let epoch = r.len()?;
    let step = r.u64()?;
    let g_step = r.u64()?;
    let d_step = r.u64()?;
    let n = r.len()?;
    let mut arrays = HashMap::with_capacity(n);
    for _ in 0..n {
        let (name, t) = r.array()?;
        if arrays.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate array `{name}`")));
        }
    }
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    if r.pos != r.buf.len() {
        return Err(corrupt("trailing bytes after rng state"));
    }

    let mut state = TrainState::new(config)?;
    {
        let (store, layers) = state.generator.parts_mut();
        restore_network(&mut arrays, "g", store, layers)?;
    }
    {
        let disc = &mut state.discriminator;
        let layers: Vec<&mut Layer> = disc.layers.iter_mut().collect();
        restore_network(&mut arrays, "d", &mut disc.store, layers)?;
    }
    restore_adam(&mut arrays, "g", &mut state.g_opt, state.generator.store(), g_step)?;
    restore_adam(&mut arrays, "d", &mut state.d_opt, &state.discriminator.store, d_step)?;

    let mut stored = Vec::new();
    while let Some(rgb) = arrays.remove(&format!("buffer.{}.rgb", stored.len())) {
        let depth = arrays
            .remove(&format!("buffer.{}.depth", stored.len()))
            .ok_or_else(|| corrupt("buffer entry without depth"))?;
        stored.push(FakePair { rgb, depth });
    }
    if stored.len() > state.config.buffer_capacity {
        return Err(corrupt("replay buffer exceeds its capacity"));
    }
    state.buffer = ReplayBuffer::from_parts(state.config.buffer_capacity, stored);

    let hist = arrays.remove("history").ok_or_else(|| corrupt("missing history"))?;
    if hist.shape().len() != 2 || hist.shape()[1] != RECORD_WIDTH {
        return Err(corrupt("history has the wrong width"));
    }
    state.history = hist.data().chunks_exact(RECORD_WIDTH).map(decode_record).collect();
    if let Some(extra) = arrays.keys().next() {
        return Err(corrupt(format!("unexpected array `{extra}`")));
    }

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.epoch = epoch;
    state.step = step;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize_input, synth_scene};
    use crate::trainer::GeneratorKind;

    fn tiny(kind: GeneratorKind) -> GanConfig {
        let mut c = GanConfig {
            input_size: 32,
            g_base_channels: 2,
            d_base_channels: 2,
            epochs_constant: 2,
            epochs_decay: 2,
            buffer_capacity: 3,
            ..GanConfig::default()
        };
        c.generator = kind;
        c.crf.patch_size = 8;
        c.crf.base_channels = 2;
        c
    }

    fn trained(kind: GeneratorKind) -> TrainState {
        let mut s = TrainState::new(tiny(kind)).unwrap();
        let batch: Vec<_> = (0..2)
            .map(|i| normalize_input(&synth_scene(i, 32, 2, 0.5, 10.0), 0.5, 10.0).unwrap())
            .collect();
        s.train_step(&batch).unwrap();
        s.train_step(&batch).unwrap();
        s
    }

    fn probe() -> crate::tensor::Tensor {
        normalize_input(&synth_scene(77, 32, 2, 0.5, 10.0), 0.5, 10.0).unwrap().rgb
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for kind in [GeneratorKind::UNet, GeneratorKind::CnnCrf] {
            let s = trained(kind);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.bin");
            checkpoint_save(&s, &path).unwrap();
            let back = checkpoint_load(&path, Some(&s.config)).unwrap();
            let x = probe();
            let a = s.generator.predict(&x).unwrap();
            let b = back.generator.predict(&x).unwrap();
            assert_eq!(a.data(), b.data());
            assert_eq!(back.generator.store().flat_values(), s.generator.store().flat_values());
            assert_eq!(back.discriminator.store.flat_values(), s.discriminator.store.flat_values());
            assert_eq!(back.g_opt.moments().0, s.g_opt.moments().0);
            assert_eq!(back.d_opt.moments().1, s.d_opt.moments().1);
            assert_eq!(back.g_opt.step_count(), 2);
            assert_eq!(back.buffer, s.buffer);
            assert_eq!(back.rng, s.rng);
            assert_eq!(back.step, s.step);
            let d_score = |st: &TrainState| st.discriminator.score(&x, &a).unwrap();
            assert_eq!(d_score(&back).data(), d_score(&s).data());
            // saving the restored state reproduces the file
            let again = dir.path().join("d.bin");
            checkpoint_save(&back, &again).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let s = trained(GeneratorKind::UNet);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        checkpoint_save(&s, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [4, 30, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            let r = checkpoint_load(&path, Some(&s.config));
            assert!(matches!(r, Err(Error::CorruptCheckpoint(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 3] ^= 1;
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(checkpoint_load(&path, None), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_and_architecture_guards() {
        let s = trained(GeneratorKind::UNet);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        checkpoint_save(&s, &path).unwrap();
        let r = checkpoint_load(&path, Some(&tiny(GeneratorKind::CnnCrf)));
        assert!(matches!(r, Err(Error::ConfigMismatch { .. })));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let r = checkpoint_load(&path, None);
        assert!(matches!(r, Err(Error::VersionMismatch { found: 7, expected: CHECKPOINT_VERSION })));
    }

    #[test]
    fn embedded_config_is_recovered() {
        let s = trained(GeneratorKind::CnnCrf);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        checkpoint_save(&s, &path).unwrap();
        assert_eq!(checkpoint_config(&path).unwrap(), s.config);
        let back = checkpoint_load(&path, None).unwrap();
        assert_eq!(back.config, s.config);
    }
}
