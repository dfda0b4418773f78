//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: an eager [`Tape`](tape::Tape) records
//! every primitive operation as it executes, and [`Tape::backward`] walks the
//! record once in reverse. The primitive set is exactly what the link
//! simulator needs — elementwise arithmetic, a handful of activations,
//! reductions, row-batched matrix application (the DFTs), time-varying
//! convolution (the channel), grouped 2-D convolution, dense layers and layer
//! norm (the receiver), gather (constellation mapping), and shape plumbing.
//!
//! Complex signals are carried as `(re, im)` pairs of real tensors; the
//! composite builders in [`ops`] provide complex arithmetic on such pairs.
//!
//! Every forward op validates its output for non-finite values and fails with
//! [`AdError::NonFinite`] rather than letting a NaN propagate silently into a
//! training run.

mod tensor;

pub mod fdcheck;
pub mod ops;
pub mod tape;

pub use tape::{NodeId, ParamId, ParamSet, Partition, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}
