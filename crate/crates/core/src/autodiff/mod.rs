//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has an empty dimension")]
    EmptyDimension { shape: Vec<usize> },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("dropout probability {0} outside [0, 1)")]
    DropoutProbability(Real),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("non-finite gradient for parameter {0}; update aborted")]
    PoisonedGradient(usize),
    #[error("parameter/gradient/state count or shape mismatch at index {0}")]
    OptimizerShape(usize),
}
