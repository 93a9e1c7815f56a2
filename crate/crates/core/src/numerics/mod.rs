//! Numerical substrate: tensors, reverse-mode differentiation, Adam,
//! finite-difference gradient checks, seeded randomness and the `DGTL0001`
//! tensor checkpoint format.

mod adam;
mod checkpoint;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamOutcome};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use rng::SeededRng;
pub use tape::{Gradients, NumericMode, Tape, Var};
pub use tensor::{Precision, Real, Tensor};


use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    BadData { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    BackwardTwice,
    #[error("variable belongs to a different tape")]
    ForeignVar,
}
