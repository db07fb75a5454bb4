//! Minimal dense-tensor core for training small transformer encoders.
//!
//! Values live in row-major [`Tensor`]s. Differentiable computation is
//! recorded on a [`Graph`] (the tape); [`Graph::backward`] walks the tape in
//! exact reverse order of recording. [`AdamW`] applies decoupled weight
//! decay updates, and [`gradcheck`] compares reverse-mode gradients against
//! central finite differences.

mod error;
pub mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
