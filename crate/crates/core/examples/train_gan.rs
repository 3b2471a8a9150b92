//! Adversarial training with spectral normalisation next to the L1-only
//! ablation, on an in-memory synthetic dataset.
//!
//! `cargo run --release --example train_gan -- [epochs]`

use advdepth::data::synth_scene;
use advdepth::trainer::{train_loop, Dataset, GanConfig, LoopOptions, TrainState};

fn main() -> advdepth::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let scene = |i: u64| synth_scene(i, 32, 3, 0.5, 10.0);
    let data = Dataset { train: (0..48).map(scene).collect(), test: (1000..1012).map(scene).collect() };

    let mut base = GanConfig::default();
    base.input_size = 32;
    base.g_base_channels = 4;
    base.d_base_channels = 4;
    base.epochs_constant = epochs - epochs / 2;
    base.epochs_decay = epochs / 2;

    for adversarial in [true, false] {
        let mut config = base.clone();
        config.adversarial = adversarial;
        let mut state = TrainState::new(config)?;
        train_loop(&mut state, &data, &LoopOptions::default())?;
        println!("{}", if adversarial { "adversarial + SN" } else { "L1 only" });
        println!("  epoch   d_loss   g_total      rel");
        for r in &state.history {
            let d = r.d_loss.map_or("       -".to_string(), |d| format!("{d:8.4}"));
            let rel = r.metrics.map_or(f64::NAN, |m| m.rel);
            println!("  {:>5} {d} {:9.4} {rel:8.4}", r.epoch, r.g_total);
        }
    }
    Ok(())
}
