//! Volumetric deep learning with deformable 3D convolutions.
//!
//! The crate provides a dense rank-5 tensor, differentiable 3D operators with
//! hand-written backward passes (regular and deformable convolution, trilinear
//! sampling, batch normalization), the dVoxResNet classifier with configurable
//! deformable-layer placement, a synthetic volume generator, a training loop,
//! and a repeated stratified cross-validation harness with paired tests.

mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::Parameter;
pub use rng::Rng;
pub use tensor::{Real, Shape, Tensor5};
