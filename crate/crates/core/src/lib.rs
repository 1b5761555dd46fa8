//! Capsule networks with one-pass variational aggregation, the
//! dynamic-routing baseline, input corruptions, dataset readers, training,
//! robustness sweeps, benchmarks and report emission.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision used for training (`f32`) and for gradient checks (`f64`).

pub mod bench;
pub mod corruption;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Tensor = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type Model = model::Model<f32>;
pub type ModelF64 = model::Model<f64>;
pub type CapsNet = model::CapsNet<f32>;
pub type CapsNetF64 = model::CapsNet<f64>;
pub type IbCapsNet = model::IbCapsNet<f32>;
pub type IbCapsNetF64 = model::IbCapsNet<f64>;
