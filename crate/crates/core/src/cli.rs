//! Command-line front end. Argument types are parsed by clap; each verb is a
//! plain function over a [`RunConfig`] so it can be driven from tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    denormalize_depth, io, load_pair, make_manifest, resize_bilinear, synth_scene, DatasetManifest, DepthFormat,
    DepthSample,
};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, CheckResult, GradcheckOptions, Scope};
use crate::metrics::{human_table, MetricsReport, CSV_HEADER};
use crate::tensor::Tensor;
use crate::trainer::{
    checkpoint_load, evaluate_samples, train_loop, Dataset, GanConfig, GeneratorKind, LoopOptions, TrainState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_NAN: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "advdepth", version, about = "Adversarial monocular depth estimation")]
pub struct Cli {
    /// Key-value config file (`key = value`, `#` comments).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact of the command.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a seeded synthetic dataset with train/test manifests.
    SynthData(SynthArgs),
    /// Train a generator; logs and checkpoints go to the output directory.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Predict metric depth for one RGB image.
    Predict(PredictArgs),
    /// Finite-difference and oracle verification suites.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// `unet` or `cnn_crf`.
    #[arg(long)]
    pub generator: Option<String>,
    /// L1-only ablation: no discriminator.
    #[arg(long)]
    pub no_adversarial: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Total epochs, split evenly between the constant and decay phases.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Disables spectral normalisation in both networks.
    #[arg(long)]
    pub no_spectral_norm: bool,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Defaults to the configured test manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Ignore ground-truth pixels deeper than this many metres.
    #[arg(long)]
    pub depth_cap: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub rgb: PathBuf,
    /// Output PFM; defaults to `<out>/<stem>.pfm`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also write a colour-mapped PNG next to the PFM.
    #[arg(long)]
    pub color: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// `primitives`, `unet`, `crf` or `all`.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Perturb the named check on purpose.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

const RUN_KEYS: [&str; 9] = [
    "data_dir",
    "n_samples",
    "split_ratio",
    "n_objects",
    "synth_size",
    "train_manifest",
    "test_manifest",
    "resume",
    "log_spectral",
];

/// Training configuration plus data and run plumbing.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gan: GanConfig,
    pub data_dir: PathBuf,
    pub n_samples: usize,
    pub split_ratio: f64,
    pub n_objects: usize,
    pub synth_size: usize,
    /// Defaults to `<data_dir>/train.txt`.
    pub train_manifest: Option<PathBuf>,
    /// Defaults to `<data_dir>/test.txt`.
    pub test_manifest: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub log_spectral: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gan: GanConfig::default(),
            data_dir: PathBuf::from("data"),
            n_samples: 600,
            split_ratio: 5.0 / 6.0,
            n_objects: 4,
            synth_size: 64,
            train_manifest: None,
            test_manifest: None,
            resume: None,
            log_spectral: true,
        }
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "n_samples" => self.n_samples = parse_field(key, v)?,
            "split_ratio" => self.split_ratio = parse_field(key, v)?,
            "n_objects" => self.n_objects = parse_field(key, v)?,
            "synth_size" => self.synth_size = parse_field(key, v)?,
            "train_manifest" => self.train_manifest = opt_path(v),
            "test_manifest" => self.test_manifest = opt_path(v),
            "resume" => self.resume = opt_path(v),
            "log_spectral" => self.log_spectral = parse_field(key, v)?,
            _ => self.gan.set(key, v)?,
        }
        Ok(())
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in self.gan.apply_kv_text(text, &RUN_KEYS)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv_text(text)?;
        Ok(c)
    }

    /// Every key with its effective value; parses back to an equal config.
    pub fn to_kv_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = self.gan.to_kv_text();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to String");
        kv("data_dir", self.data_dir.display().to_string());
        kv("n_samples", self.n_samples.to_string());
        kv("split_ratio", self.split_ratio.to_string());
        kv("n_objects", self.n_objects.to_string());
        kv("synth_size", self.synth_size.to_string());
        kv("train_manifest", path(&self.train_manifest));
        kv("test_manifest", path(&self.test_manifest));
        kv("resume", path(&self.resume));
        kv("log_spectral", self.log_spectral.to_string());
        s
    }

    pub fn train_manifest_path(&self) -> PathBuf {
        self.train_manifest.clone().unwrap_or_else(|| self.data_dir.join("train.txt"))
    }

    pub fn test_manifest_path(&self) -> PathBuf {
        self.test_manifest.clone().unwrap_or_else(|| self.data_dir.join("test.txt"))
    }

    /// Defaults, then the config file, then `--seed`, then `--set` pairs.
    pub fn resolve(config: Option<&Path>, seed: Option<u64>, sets: &[String]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            c.apply_kv_text(&text)?;
        }
        if let Some(s) = seed {
            c.gan.seed = s;
        }
        for pair in sets {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects key=value, got `{pair}`")))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads every pair listed in a manifest.
pub fn load_manifest_samples(path: &Path) -> Result<Vec<DepthSample>> {
    DatasetManifest::read(path)?
        .pairs
        .iter()
        .map(|(rgb, depth)| load_pair(rgb, depth, DepthFormat::detect(depth)?))
        .collect()
}

/// Writes `n_samples` synthetic scenes under `out` as `rgb/NNNNN.png` and
/// `depth/NNNNN.pfm`, splits them into `train.txt`/`test.txt`, then reloads
/// every pair as a self-check. Returns the two manifests.
pub fn cmd_synth_data(config: &RunConfig, out: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let (d_min, d_max) = (config.gan.d_min, config.gan.d_max);
    for sub in ["rgb", "depth"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_file(&out.join("config.txt"), config.to_kv_text())?;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.gan.seed);
    for i in 0..config.n_samples {
        let s = synth_scene(seeds.random(), config.synth_size, config.n_objects, d_min, d_max);
        io::write_png_rgb(&out.join("rgb").join(format!("{i:05}.png")), &s.rgb)?;
        io::write_pfm(&out.join("depth").join(format!("{i:05}.pfm")), &s.depth)?;
    }
    let (train, test) = make_manifest(out, config.split_ratio, config.gan.seed)?;
    train.write(&out.join("train.txt"))?;
    test.write(&out.join("test.txt"))?;
    for m in [&train, &test] {
        for (rgb, depth) in &m.pairs {
            load_pair(rgb, depth, DepthFormat::Pfm)?.validate()?;
        }
    }
    log::info!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
    Ok((train, test))
}

/// Applies the `train` verb's flags on top of a resolved config.
pub fn apply_train_args(config: &mut RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(g) = &args.generator {
        config.gan.generator = GeneratorKind::parse(g)?;
    }
    if args.no_adversarial {
        config.gan.adversarial = false;
    }
    if let Some(l) = args.lambda {
        config.gan.lambda = l;
    }
    if let Some(n) = args.epochs {
        config.gan.epochs_decay = n / 2;
        config.gan.epochs_constant = n - n / 2;
    }
    if args.no_spectral_norm {
        config.gan.g_spectral_norm = false;
        config.gan.d_spectral_norm = false;
    }
    if let Some(r) = &args.resume {
        config.resume = Some(r.clone());
    }
    config.gan.validate()
}

/// Trains from the configured manifests into `out`, resuming if asked.
pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<TrainState> {
    config.gan.validate()?;
    let data = Dataset {
        train: load_manifest_samples(&config.train_manifest_path())?,
        test: load_manifest_samples(&config.test_manifest_path())?,
    };
    let mut state = match &config.resume {
        Some(ckpt) => {
            let mut s = checkpoint_load(ckpt, Some(&config.gan))?;
            // the schedule may be extended on resume; shapes are already checked
            s.config = config.gan.clone();
            s
        }
        None => TrainState::new(config.gan.clone())?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.txt"), config.to_kv_text())?;
    let opts = LoopOptions { run_dir: Some(out), stop_at: None, log_spectral: config.log_spectral };
    train_loop(&mut state, &data, &opts)?;
    Ok(state)
}

/// Aggregate report and one report per sample.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub aggregate: MetricsReport,
    pub per_sample: Vec<MetricsReport>,
    pub table: String,
}

/// Scores a checkpoint. When `expect` is given the checkpoint must match its
/// architecture. Writes `eval_metrics.csv` and `eval_per_sample.csv`.
pub fn cmd_eval(
    checkpoint: &Path,
    manifest: &Path,
    depth_cap: Option<f64>,
    expect: Option<&GanConfig>,
    out: &Path,
) -> Result<EvalOutput> {
    let state = checkpoint_load(checkpoint, expect)?;
    let m = DatasetManifest::read(manifest)?;
    let samples = load_manifest_samples(manifest)?;
    let (aggregate, per_sample) = evaluate_samples(&state.generator, &state.config, &samples, depth_cap)?;

    let mut rows = format!("rgb,{CSV_HEADER}\n");
    for ((rgb, _), r) in m.pairs.iter().zip(&per_sample) {
        writeln!(rows, "{},{}", rgb.display(), r.to_csv_row()).expect("write to String");
    }
    write_file(&out.join("eval_per_sample.csv"), rows)?;
    write_file(&out.join("eval_metrics.csv"), format!("{CSV_HEADER}\n{}\n", aggregate.to_csv_row()))?;
    let label = format!("epoch {}", state.epoch);
    let table = human_table(&[(label.as_str(), &aggregate)]);
    Ok(EvalOutput { aggregate, per_sample, table })
}

/// Anchors of a perceptually ordered dark-blue → green → yellow ramp,
/// interpolated linearly. Near is bright.
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// RGB colour for `t ∈ [0, 1]` on the fixed ramp.
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (RAMP.len() - 1) as f64;
    let i = (pos.floor() as usize).min(RAMP.len() - 2);
    let f = pos - i as f64;
    let mut c = [0u8; 3];
    for k in 0..3 {
        c[k] = (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8;
    }
    c
}

/// Predicted metric depth at the image's own resolution.
pub fn predict_depth(state: &TrainState, rgb: &Tensor) -> Result<Tensor> {
    let (_, h, w) = rgb.dims3()?;
    let c = &state.config;
    let x = resize_bilinear(rgb, c.input_size, c.input_size)?.map(|v| 2.0 * v - 1.0);
    let depth = denormalize_depth(&state.generator.predict(&x)?, c.d_min, c.d_max);
    let back = resize_bilinear(&depth, h, w)?;
    Ok(back.map(|v| v.clamp(c.d_min, c.d_max)))
}

/// Writes the prediction as PFM and, if `color_png` is set, a colour-mapped
/// PNG of the same size. Returns the depth tensor.
pub fn cmd_predict(checkpoint: &Path, rgb_path: &Path, out_path: &Path, color_png: Option<&Path>) -> Result<Tensor> {
    let state = checkpoint_load(checkpoint, None)?;
    let rgb = io::read_png_rgb(rgb_path)?;
    let depth = predict_depth(&state, &rgb)?;
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    io::write_pfm(out_path, &depth)?;
    if let Some(png) = color_png {
        let (_, h, w) = depth.dims3()?;
        let (lo, hi) = (state.config.d_min, state.config.d_max);
        let bytes: Vec<u8> = depth.data().iter().flat_map(|&d| colormap((hi - d) / (hi - lo))).collect();
        io::write_png_rgb8(png, w, h, &bytes)?;
    }
    Ok(depth)
}

/// Runs the verification suites and writes `gradcheck.txt`.
pub fn cmd_gradcheck(scope: Scope, opts: &GradcheckOptions, out: &Path) -> Result<Vec<CheckResult>> {
    let results = run_gradcheck(scope, opts)?;
    let report: String = results.iter().map(|r| format!("{r}\n")).collect();
    write_file(&out.join("gradcheck.txt"), report)?;
    Ok(results)
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ConfigMismatch { .. } | Error::VersionMismatch { .. } => EXIT_CONFIG,
        Error::NanAbort(_) | Error::NonFiniteGradient(_) => EXIT_NAN,
        _ => EXIT_RUNTIME,
    }
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let mut config = RunConfig::resolve(cli.config.as_deref(), cli.seed, &cli.set)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::SynthData(a) => {
            if let Some(n) = a.n_samples {
                config.n_samples = n;
            }
            if let Some(s) = a.size {
                config.synth_size = s;
            }
            let (train, test) = cmd_synth_data(&config, out)?;
            println!("{} train / {} test samples in {}", train.len(), test.len(), out.display());
        }
        Command::Train(a) => {
            apply_train_args(&mut config, a)?;
            let state = cmd_train(&config, out)?;
            if let Some(m) = state.history.last().and_then(|r| r.metrics) {
                println!("{}", human_table(&[("final", &m)]));
            }
        }
        Command::Eval(a) => {
            let manifest = a.manifest.clone().unwrap_or_else(|| config.test_manifest_path());
            let expect = cli.config.is_some().then_some(&config.gan);
            let r = cmd_eval(&a.checkpoint, &manifest, a.depth_cap, expect, out)?;
            print!("{}", r.table);
        }
        Command::Predict(a) => {
            let stem = a.rgb.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let pfm = a.output.clone().unwrap_or_else(|| out.join(format!("{stem}.pfm")));
            let png = a.color.then(|| pfm.with_extension("png"));
            cmd_predict(&a.checkpoint, &a.rgb, &pfm, png.as_deref())?;
            println!("{}", pfm.display());
        }
        Command::Gradcheck(a) => {
            let opts = GradcheckOptions { seeds: a.seeds, fault: a.inject_fault.clone() };
            let results = cmd_gradcheck(Scope::parse(&a.scope)?, &opts, out)?;
            for r in &results {
                println!("{r}");
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_through_text() {
        let mut c = RunConfig::default();
        c.n_samples = 12;
        c.test_manifest = Some(PathBuf::from("x/test.txt"));
        c.gan.lambda = 3.5;
        let back = RunConfig::from_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = RunConfig::from_kv_text("no_such_key = 1").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
    }

    #[test]
    fn later_sources_override_earlier_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "seed = 3\nlambda = 7 # comment\n").unwrap();
        let c = RunConfig::resolve(Some(&path), Some(9), &["lambda=11".into()]).unwrap();
        assert_eq!(c.gan.seed, 9);
        assert_eq!(c.gan.lambda, 11.0);
    }

    #[test]
    fn epochs_flag_splits_schedule() {
        let mut c = RunConfig::default();
        let args = TrainArgs { epochs: Some(5), no_spectral_norm: true, ..Default::default() };
        apply_train_args(&mut c, &args).unwrap();
        assert_eq!((c.gan.epochs_constant, c.gan.epochs_decay), (3, 2));
        assert!(!c.gan.g_spectral_norm && !c.gan.d_spectral_norm);
    }

    #[test]
    fn colormap_hits_anchors_and_clamps() {
        assert_eq!(colormap(0.0), [68, 1, 84]);
        assert_eq!(colormap(1.0), [253, 231, 37]);
        assert_eq!(colormap(0.5), [33, 145, 140]);
        assert_eq!(colormap(-3.0), colormap(0.0));
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }

    #[test]
    fn exit_codes_are_distinct_per_class() {
        assert_eq!(exit_code(&Error::NanAbort("x".into())), EXIT_NAN);
        assert_eq!(exit_code(&Error::ConfigMismatch { expected: 1, found: 2 }), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::CorruptCheckpoint("x".into())), EXIT_RUNTIME);
    }
}
