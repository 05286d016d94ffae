//! Minimal dense-tensor reverse-mode autodiff engine.
//!
//! The engine exists to train two small convolutional models and to make
//! their gradients checkable against central finite differences, so it stays
//! deliberately small: contiguous row-major storage, dynamic shapes, stride-1
//! convolutions via im2col + GEMM, and a tape-free graph of reference-counted
//! nodes. Graphs are built per step and dropped afterwards; parameters live
//! in a [`ParameterStore`] between steps.
//!
//! Element type is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks in `f64`. All reductions run in a fixed order, so results are
//! bit-reproducible for a given build regardless of caller threading.

mod array;
mod graph;
pub mod gradcheck;
mod kernels;
mod ops;
mod scalar;
mod store;

pub use array::Array;
pub use graph::Tensor;
pub use ops::{triplet_batch_all, PadMode, TripletLoss};
pub use scalar::Scalar;
pub use store::{fan_in_uniform, CheckpointError, Gradients, ParameterStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("bad operand for {op}: {msg}")]
    BadOperand { op: &'static str, msg: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Enables finiteness checks after every forward op. Cheap enough for tests,
/// off by default in training runs.
pub fn set_checked_mode(on: bool) {
    graph::CHECKED.store(on, std::sync::atomic::Ordering::Relaxed);
}
