use std::path::{Path, PathBuf};
use std::process::Command;

use advdepth::cli::{
    apply_train_args, cmd_eval, cmd_predict, cmd_synth_data, cmd_train, load_manifest_samples, RunConfig, TrainArgs,
    EXIT_CONFIG, EXIT_OK, EXIT_VERIFY,
};
use advdepth::data::{io, normalize_input, denormalize_depth};
use advdepth::metrics::{compute_metrics, MetricsReport};
use advdepth::trainer::checkpoint_load;

fn small_config(data_dir: &Path, n: usize) -> RunConfig {
    let mut c = RunConfig::from_kv_text(
        "input_size = 32\ng_base_channels = 2\nd_base_channels = 2\nsynth_size = 32\nn_objects = 3\n",
    )
    .unwrap();
    c.n_samples = n;
    c.data_dir = data_dir.to_path_buf();
    c
}

fn train_small(config: &RunConfig, run: &Path, args: TrainArgs) -> RunConfig {
    let mut c = config.clone();
    apply_train_args(&mut c, &TrainArgs { epochs: args.epochs.or(Some(2)), ..args }).unwrap();
    cmd_train(&c, run).unwrap();
    c
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn synth_data_splits_600_into_500_and_100() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path(), 600);
    c.synth_size = 16;
    let (train, test) = cmd_synth_data(&c, dir.path()).unwrap();
    assert_eq!((train.len(), test.len()), (500, 100));
    assert_eq!(read(dir.path().join("train.txt")).lines().filter(|l| !l.starts_with('#')).count(), 500);
    assert_eq!(read(dir.path().join("test.txt")).lines().filter(|l| !l.starts_with('#')).count(), 100);
}

#[test]
fn synth_data_is_byte_identical_on_rerun() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = small_config(Path::new("data"), 10);
    cmd_synth_data(&c, a.path()).unwrap();
    cmd_synth_data(&c, b.path()).unwrap();
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a.path()).unwrap(), y.strip_prefix(b.path()).unwrap());
        let (bx, by) = (std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        assert_eq!(bx, by, "{} differs", x.display());
    }
}

#[test]
fn synth_pairs_pass_sample_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path(), 12);
    cmd_synth_data(&c, dir.path()).unwrap();
    for m in ["train.txt", "test.txt"] {
        for s in load_manifest_samples(&dir.path().join(m)).unwrap() {
            s.validate().unwrap();
            assert!(s.depth.data().iter().all(|&d| (0.5..=10.0).contains(&d)));
        }
    }
}

#[test]
fn ablation_csv_has_empty_d_loss_column() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(&dir.path().join("data"), 10);
    cmd_synth_data(&c, &c.data_dir).unwrap();
    train_small(&c, &dir.path().join("run"), TrainArgs { no_adversarial: true, ..Default::default() });
    let csv = read(dir.path().join("run/losses.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[2], "", "d_loss should be empty in `{row}`");
        assert_eq!(cols[3], "0", "no adversarial term in `{row}`");
    }
}

#[test]
fn identical_invocations_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(&dir.path().join("data"), 10);
    cmd_synth_data(&c, &c.data_dir).unwrap();
    for run in ["a", "b"] {
        train_small(&c, &dir.path().join(run), TrainArgs::default());
    }
    for f in ["losses.csv", "spectral_log.csv", "config.txt"] {
        assert_eq!(read(dir.path().join("a").join(f)), read(dir.path().join("b").join(f)), "{f}");
    }
    assert_eq!(
        std::fs::read(dir.path().join("a/checkpoint_last.bin")).unwrap(),
        std::fs::read(dir.path().join("b/checkpoint_last.bin")).unwrap()
    );
}

#[test]
fn crf_run_logs_nll_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(&dir.path().join("data"), 10);
    c.gan.crf.patch_size = 8;
    c.gan.crf.base_channels = 2;
    cmd_synth_data(&c, &c.data_dir).unwrap();
    train_small(&c, &dir.path().join("run"), TrainArgs { generator: Some("cnn_crf".into()), ..Default::default() });
    let log = read(dir.path().join("run/crf_log.csv"));
    let rows: Vec<Vec<f64>> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2);
    for (e, r) in rows.iter().enumerate() {
        assert_eq!(r[0], e as f64);
        assert!(r[1].is_finite() && r[2] >= 0.0 && r[3] >= 0.0);
    }
}

#[test]
fn echoed_config_reproduces_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(&dir.path().join("data"), 10);
    cmd_synth_data(&c, &c.data_dir).unwrap();
    let used = train_small(&c, &dir.path().join("run"), TrainArgs { lambda: Some(42.0), ..Default::default() });
    let echoed = RunConfig::from_kv_text(&read(dir.path().join("run/config.txt"))).unwrap();
    assert_eq!(echoed, used);
    assert_eq!(echoed.gan.lambda, 42.0);
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: RunConfig,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let c = small_config(&root.join("data"), 12);
    cmd_synth_data(&c, &c.data_dir).unwrap();
    let config = train_small(&c, &root.join("run"), TrainArgs::default());
    Trained { _dir: dir, root, config }
}

/// Pixel-weighted mean of per-sample values.
fn weighted(per: &[MetricsReport], f: impl Fn(&MetricsReport) -> f64) -> f64 {
    let n: usize = per.iter().map(|r| r.n_pixels).sum();
    per.iter().map(|r| f(r) * r.n_pixels as f64).sum::<f64>() / n as f64
}

#[test]
fn eval_aggregate_is_pixel_weighted_mean_of_samples() {
    let t = trained();
    let out = cmd_eval(
        &t.root.join("run/checkpoint_last.bin"),
        &t.config.test_manifest_path(),
        None,
        None,
        &t.root.join("eval"),
    )
    .unwrap();
    let agg = out.aggregate;
    assert!((agg.rel - weighted(&out.per_sample, |r| r.rel)).abs() < 1e-12);
    assert!((agg.delta1 - weighted(&out.per_sample, |r| r.delta1)).abs() < 1e-12);
    let rms = weighted(&out.per_sample, |r| r.rms * r.rms).sqrt();
    assert!((agg.rms - rms).abs() < 1e-12);

    let per_csv = read(t.root.join("eval/eval_per_sample.csv"));
    assert_eq!(per_csv.lines().count(), 1 + out.per_sample.len());
    let agg_csv = read(t.root.join("eval/eval_metrics.csv"));
    assert_eq!(MetricsReport::parse_csv_row(agg_csv.lines().nth(1).unwrap()).unwrap().n_pixels, agg.n_pixels);
    assert!(out.table.contains("rel"));
}

#[test]
fn depth_cap_matches_masked_oracle() {
    let t = trained();
    let ckpt = t.root.join("run/checkpoint_last.bin");
    let out = cmd_eval(&ckpt, &t.config.test_manifest_path(), Some(7.0), None, &t.root.join("eval")).unwrap();

    // recompute from raw predictions, dropping ground truth beyond 7 m by hand
    let state = checkpoint_load(&ckpt, None).unwrap();
    let (mut sum_rel, mut n) = (0.0, 0usize);
    for s in load_manifest_samples(&t.config.test_manifest_path()).unwrap() {
        let x = normalize_input(&s, 0.5, 10.0).unwrap();
        let pred = denormalize_depth(&state.generator.predict(&x.rgb).unwrap(), 0.5, 10.0);
        for (&p, &g) in pred.data().iter().zip(s.depth.data()) {
            if g <= 7.0 {
                sum_rel += (g - p).abs() / g;
                n += 1;
            }
        }
    }
    assert_eq!(out.aggregate.n_pixels, n);
    assert!((out.aggregate.rel - sum_rel / n as f64).abs() < 1e-12);
}

#[test]
fn ground_truth_against_itself_is_perfect() {
    let t = trained();
    for s in load_manifest_samples(&t.config.test_manifest_path()).unwrap() {
        let r = compute_metrics(&s.depth, &s.depth, None).unwrap();
        assert_eq!([r.rel, r.sq_rel, r.log10, r.rms, r.rms_log], [0.0; 5]);
        assert_eq!([r.delta1, r.delta2, r.delta3], [1.0; 3]);
    }
}

#[test]
fn eval_rejects_mismatched_architecture() {
    let t = trained();
    let mut other = t.config.gan.clone();
    other.g_base_channels = 4;
    let e = cmd_eval(
        &t.root.join("run/checkpoint_last.bin"),
        &t.config.test_manifest_path(),
        None,
        Some(&other),
        &t.root.join("eval"),
    )
    .unwrap_err();
    assert!(matches!(e, advdepth::Error::ConfigMismatch { .. }));
}

#[test]
fn predict_writes_in_range_deterministic_outputs() {
    let t = trained();
    // a 40×40 image exercises both resizes around the 32×32 model
    let scene = advdepth::data::synth_scene(99, 40, 3, 0.5, 10.0);
    let rgb = t.root.join("in.png");
    io::write_png_rgb(&rgb, &scene.rgb).unwrap();
    let ckpt = t.root.join("run/checkpoint_last.bin");
    let (a, b) = (t.root.join("a.pfm"), t.root.join("b.pfm"));
    let png = t.root.join("a.png");
    let depth = cmd_predict(&ckpt, &rgb, &a, Some(&png)).unwrap();
    cmd_predict(&ckpt, &rgb, &b, None).unwrap();

    assert_eq!(depth.shape(), &[1, 40, 40]);
    let back = io::read_pfm(&a).unwrap();
    assert!(back.data().iter().all(|&d| (0.5..=10.0).contains(&d)));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let coloured = io::read_png_rgb(&png).unwrap();
    assert_eq!(coloured.shape(), &[3, 40, 40]);
}

fn bin(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_advdepth"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into_owned())
}

#[test]
fn gradcheck_verb_passes_and_names_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = bin(&["gradcheck", "--scope", "primitives", "--seeds", "2"], dir.path());
    assert_eq!(code, EXIT_OK, "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")));

    let (code, text) = bin(&["gradcheck", "--scope", "primitives", "--seeds", "2", "--inject-fault", "tanh"], dir.path());
    assert_eq!(code, EXIT_VERIFY);
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].contains("tanh"));
}

#[test]
fn crf_scope_covers_nll_gradients_and_map_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = bin(&["gradcheck", "--scope", "crf", "--seeds", "3"], dir.path());
    assert_eq!(code, EXIT_OK, "{text}");
    for name in ["crf_nll", "crf_nll_through_unary_cnn", "crf_map_vs_ascent"] {
        assert!(text.lines().any(|l| l.split_whitespace().nth(1) == Some(name)), "{name} missing");
    }
    assert!(dir.path().join("gradcheck.txt").is_file());
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = bin(&["--set", "not_a_key=1", "gradcheck", "--scope", "primitives"], dir.path());
    assert_eq!(code, EXIT_CONFIG);
    let (code, _) = bin(&["gradcheck", "--scope", "everything"], dir.path());
    assert_eq!(code, EXIT_CONFIG);
}
