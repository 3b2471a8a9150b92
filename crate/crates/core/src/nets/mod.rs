//! Generator and discriminator architectures.

mod discriminator;
mod layer;
mod unet;

pub use discriminator::{receptive_field, DiscLayerSpec, PatchDiscriminator, PatchDiscriminatorSpec};
pub use layer::{Layer, LayerKind, SPECTRAL_WARMUP_ITERS};
pub use unet::{UNet, UNetForwardOptions, UNetSpec, LEAKY_SLOPE};
