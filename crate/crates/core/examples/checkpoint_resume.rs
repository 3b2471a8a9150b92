//! Interrupting a run and resuming from its checkpoint reproduces the
//! uninterrupted run exactly.
//!
//! `cargo run --release --example checkpoint_resume`

use advdepth::data::synth_scene;
use advdepth::trainer::{checkpoint_load, checkpoint_save, train_loop, Dataset, GanConfig, LoopOptions, TrainState};

fn main() -> advdepth::Result<()> {
    let scene = |i: u64| synth_scene(i, 32, 2, 0.5, 10.0);
    let data = Dataset { train: (0..12).map(scene).collect(), test: (100..104).map(scene).collect() };
    let mut config = GanConfig::default();
    config.input_size = 32;
    config.g_base_channels = 2;
    config.d_base_channels = 2;
    config.epochs_constant = 2;
    config.epochs_decay = 2;

    let mut straight = TrainState::new(config.clone())?;
    train_loop(&mut straight, &data, &LoopOptions::default())?;

    let dir = tempfile::tempdir().map_err(|e| advdepth::Error::InvalidArgument(e.to_string()))?;
    let path = dir.path().join("halfway.bin");
    let mut first = TrainState::new(config)?;
    train_loop(&mut first, &data, &LoopOptions { stop_at: Some(2), ..Default::default() })?;
    checkpoint_save(&first, &path)?;
    drop(first);

    let mut resumed = checkpoint_load(&path, None)?;
    println!("resumed at epoch {} step {}", resumed.epoch, resumed.step);
    train_loop(&mut resumed, &data, &LoopOptions::default())?;

    let same = straight.generator.store().flat_values() == resumed.generator.store().flat_values()
        && straight.discriminator.store.flat_values() == resumed.discriminator.store.flat_values();
    println!("parameters bit-identical to the uninterrupted run: {same}");
    println!("history identical: {}", straight.history == resumed.history);
    Ok(())
}
