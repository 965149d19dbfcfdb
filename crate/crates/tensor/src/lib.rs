//! Dense f32 tensors with tape-based reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `Tensor` storage, a [`Tape`]
//! that records every forward operation eagerly, and a single backward sweep
//! that walks the tape in reverse creation order (which is reverse
//! topological order by construction). Leaf parameters live in shared
//! [`Var`] cells so gradients accumulate across backward passes until
//! `zero_grad` is called.
//!
//! Matrix products and 3x3 convolutions lower onto a blocked GEMM; everything
//! else is straightforward loops. All computation is CPU, f32, and
//! deterministic: the same inputs produce bit-identical outputs within a
//! process.

mod conv;
mod gemm;
pub mod optim;
mod tape;
mod tensor;
mod var;

pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
pub use var::Var;

use thiserror::Error;

/// Errors surfaced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected shape {expected:?}, got {actual:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        actual: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("degenerate input to {op}: {msg}")]
    Degenerate { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
