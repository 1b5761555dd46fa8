//! Differentiable building blocks with hand-written backward passes.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod param;

pub use activation::{l2_norm, relu_inplace, sigmoid, squash, squash_backward, SQUASH_EPS};
pub use conv::{conv_output_side, Conv2d, ConvGeometry};
pub use linear::Linear;
pub use param::{count_parameters, Param, Parameters};
