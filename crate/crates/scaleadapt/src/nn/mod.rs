//! Minimal reverse-mode autodiff stack: tensors, a tape of recorded ops,
//! and the layers the segmentation/discriminator networks are built from.

pub mod gradcheck;
pub mod layers;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use layers::{BatchNormLayer, Conv2dLayer, Params};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
