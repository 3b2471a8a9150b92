//! Trains briefly through the command-line functions, then predicts depth
//! for one image and writes a PFM and a colour-mapped PNG.
//!
//! `cargo run --release --example predict_depth -- [out_dir]`

use advdepth::cli::{apply_train_args, cmd_predict, cmd_synth_data, cmd_train, RunConfig, TrainArgs};

fn main() -> advdepth::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| {
        std::env::temp_dir().join("advdepth_predict_example")
    });
    let mut config = RunConfig::from_kv_text(
        "input_size = 32\ng_base_channels = 4\nd_base_channels = 4\nn_samples = 24\nsynth_size = 40\n",
    )?;
    config.data_dir = out.join("data");
    cmd_synth_data(&config, &config.data_dir)?;
    apply_train_args(&mut config, &TrainArgs { epochs: Some(3), ..Default::default() })?;
    let run = out.join("run");
    cmd_train(&config, &run)?;

    let rgb = config.data_dir.join("rgb").join("00000.png");
    let pfm = out.join("00000_pred.pfm");
    let png = out.join("00000_pred.png");
    let depth = cmd_predict(&run.join("checkpoint_last.bin"), &rgb, &pfm, Some(&png))?;
    let (lo, hi) = depth.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &d| (a.min(d), b.max(d)));
    println!("predicted {:?} depth in [{lo:.2}, {hi:.2}] m", depth.shape());
    println!("wrote {} and {}", pfm.display(), png.display());
    Ok(())
}
