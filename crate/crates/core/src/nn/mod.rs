//! Minimal tensor and layer engine with exact reverse-mode gradients.

pub mod adam;
pub mod gemm;
pub mod layers;
pub mod tensor;

/// Element type of the engine.
#[cfg(not(feature = "f64"))]
pub type Float = f32;
#[cfg(feature = "f64")]
pub type Float = f64;

pub use adam::{Adam, AdamHyper, Moments};
pub use layers::{
    ActKind, Activation, Conv2d, ConvTranspose2d, InstanceNorm, Layer, LayerKind, LayerSpec, Module, Param,
    ResidualBlock, Resize, ResizeDir, Sequential,
};
pub use tensor::{downsample2, upsample2, Tensor4};
