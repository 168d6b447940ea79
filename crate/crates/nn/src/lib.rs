//! Minimal CPU convolutional network engine.
//!
//! Layers implement explicit forward and backward passes over NCHW batches.
//! Convolutions lower to im2col + gemm and process samples of a batch in
//! parallel through [`exec`]. All kernels are generic over [`Scalar`] so the
//! same network can be instantiated in `f64` for finite-difference checks.

pub mod error;
pub mod exec;
pub mod layers;
pub mod param;
pub mod scalar;
pub mod seq;
pub mod tensor;

pub use error::{NnError, Result};
pub use layers::{sigmoid, Backprop, Conv2d, ConvSpec, Dense, Layer};
pub use param::{AdamConfig, AdamState, Param};
pub use scalar::Scalar;
pub use seq::{Sequential, Trace, LEAKY_SLOPE};
pub use tensor::Tensor;
