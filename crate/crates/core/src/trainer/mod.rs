//! Adversarial training loop and its stabilisers.

mod buffer;
mod checkpoint;
mod config;
mod init;
mod model;
mod run;
mod state;

pub use buffer::{buffer_exchange, FakePair, ReplayBuffer};
pub use checkpoint::{checkpoint_config, checkpoint_load, checkpoint_save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{lr_at_epoch, GanConfig, GeneratorKind};
pub use init::{fans, xavier_init};
pub use model::{build_discriminator, Generator, GeneratorOutput};
pub use run::{
    evaluate, evaluate_samples, loss_csv_row, spectral_sigmas, train_epoch, train_loop, Dataset, LoopOptions, LOSS_CSV_HEADER,
};
pub use state::{EpochRecord, StepReport, TrainState, ADAM_EPS};
