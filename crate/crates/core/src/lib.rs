//! Numeric core for data-parallel ViT training: dense tensors with a
//! reverse-mode tape, a finite-difference gradient oracle, a configurable
//! Vision Transformer, and dataset loading and sharding.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod vit;

pub use data::Dataset;
pub use error::{DataError, ModelError, TensorError};
pub use params::ParamSet;
pub use tensor::{Scalar, Tensor};
pub use vit::ViTConfig;
