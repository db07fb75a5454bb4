use thiserror::Error;

use crate::graph::OpKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op:?}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: OpKind,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op:?}: {msg}")]
    InvalidArgument { op: OpKind, msg: String },
    #[error("{op:?}: non-finite value in output")]
    NonFinite { op: OpKind },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
}
