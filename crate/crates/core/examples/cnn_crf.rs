//! Trains the superpixel CNN-CRF generator and reports the learned pairwise
//! weights and the piecewise-constant structure of its output.
//!
//! `cargo run --release --example cnn_crf`

use advdepth::crf::segment_superpixels;
use advdepth::data::{normalize_input, synth_scene};
use advdepth::trainer::{train_loop, Dataset, GanConfig, GeneratorKind, LoopOptions, TrainState};

fn main() -> advdepth::Result<()> {
    let scene = |i: u64| synth_scene(i, 32, 3, 0.5, 10.0);
    let data = Dataset { train: (0..16).map(scene).collect(), test: (500..504).map(scene).collect() };
    let mut config = GanConfig::default();
    config.generator = GeneratorKind::CnnCrf;
    config.input_size = 32;
    config.d_base_channels = 4;
    config.crf.patch_size = 8;
    config.crf.base_channels = 4;
    config.epochs_constant = 2;
    config.epochs_decay = 1;

    let mut state = TrainState::new(config)?;
    train_loop(&mut state, &data, &LoopOptions::default())?;
    for r in &state.history {
        let beta = r.beta.unwrap_or_default();
        println!("epoch {}: nll {:.4}  β = [{:.4}, {:.4}]", r.epoch, r.crf_nll.unwrap_or(f64::NAN), beta[0], beta[1]);
    }

    let crf = state.generator.as_crf().expect("CRF generator");
    let x = normalize_input(&data.test[0], 0.5, 10.0)?;
    let pred = crf.predict(&x.rgb)?;
    let seg = segment_superpixels(&x.rgb, crf.spec.superpixels, crf.spec.method)?;
    let constant = seg
        .node_pixels
        .iter()
        .all(|px| px.iter().all(|&p| pred.data()[p] == pred.data()[px[0]]));
    println!("{} superpixels; prediction constant on each: {constant}", seg.nodes());
    Ok(())
}
