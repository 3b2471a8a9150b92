//! Conditional-adversarial monocular depth estimation.

pub mod cli;
pub mod crf;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod spectral_norm;
pub mod tensor;

pub use error::{Error, Result};
pub mod nets;
pub mod trainer;
