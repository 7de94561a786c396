//! Tensors and tape-based reverse-mode differentiation.

pub mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use kernels::{gelu, unfold_map};
pub use tape::{Tape, Var};
pub use tensor::{broadcast_shape, numel, strides, DType, Scalar, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
