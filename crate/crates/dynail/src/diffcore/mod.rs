//! Reverse-mode automatic differentiation over dynamically built expression
//! graphs, plus the Adam and SGD optimizers.
//!
//! A [`Tape`] is a Wengert list: operations are recorded eagerly (forward
//! values are computed at insertion time) and replayed in reverse to
//! accumulate adjoints. Graphs are rebuilt per minibatch/rollout; trajectory
//! lengths vary, so nothing is compiled or cached across builds.
//!
//! All values are 64-bit floats. Every operation checks its output for
//! non-finite values and reports the offending node, so a NaN is caught where
//! it is produced rather than where it is consumed.

mod fd;
mod optim;
mod tape;
mod tensor;

pub use fd::{finite_diff_check, flatten, unflatten};
pub use optim::{sgd_step, Adam, AdamConfig};
pub use tape::{GradMap, NodeId, SeededBackward, Tape};
pub use tensor::{standard_normal, Tensor};

use thiserror::Error;

/// Errors from graph construction, evaluation, and optimization.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient requested for non-scalar output node {node} (len {len})")]
    NonScalarOutput { node: usize, len: usize },
    #[error("tensor shape {shape:?} does not match data length {len}")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("non-finite gradient; optimizer step rejected")]
    NonFiniteGradient,
    #[error("optimizer state holds {expected} tensors, got {got}")]
    ParamCountMismatch { expected: usize, got: usize },
}
