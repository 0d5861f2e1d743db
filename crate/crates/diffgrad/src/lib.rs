//! Dense tensors with reverse-mode gradients.
//!
//! Every operation the splatting pipeline differentiates through is recorded
//! on the tensors themselves: each result keeps its parents and a closure
//! mapping the output gradient to parent gradients. [`Tensor::backward`]
//! walks the recorded graph in reverse creation order.
//!
//! Besides the generic elementwise, reduction and shape operations this crate
//! carries the few heavier kernels the pipeline needs (3x3 convolution,
//! masked graph attention), a small layer library, Adam, and a central
//! difference gradient checker.

mod adam;
mod conv;
mod error;
mod gradcheck;
pub mod nn;
mod ops;
mod real;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::conv2d_3x3;
pub use error::{GradCheckError, GradError};
pub use gradcheck::{grad_check, grad_check_param, GradCheckReport};
pub use ops::masked_attention;
pub use real::Real;
pub use tensor::{BackwardFn, Tensor};
