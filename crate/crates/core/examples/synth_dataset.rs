//! Writes a small seeded synthetic dataset with train/test manifests and
//! reloads it.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use advdepth::cli::{cmd_synth_data, load_manifest_samples, RunConfig};

fn main() -> advdepth::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| {
        std::env::temp_dir().join("advdepth_synth_example")
    });
    let mut config = RunConfig::default();
    config.n_samples = 24;
    config.synth_size = 48;
    let (train, test) = cmd_synth_data(&config, &out)?;
    println!("{} train / {} test pairs under {}", train.len(), test.len(), out.display());

    let samples = load_manifest_samples(&out.join("train.txt"))?;
    let (lo, hi) = samples
        .iter()
        .flat_map(|s| s.depth.data().iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    println!("training depths span {lo:.2}–{hi:.2} m");
    Ok(())
}
