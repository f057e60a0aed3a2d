//! Dense tensors, the handful of differentiable kernels the policy networks
//! need, an adaptive-moment optimizer and a binary checkpoint format.
//!
//! There is no general computation graph. Each network in the policy crate
//! calls the forward kernels, keeps whatever it needs for the backward pass
//! and calls the matching `*_backward` kernel itself.
//!
//! Every kernel is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod loss;
pub mod ops;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use params::{Adam, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
