//! Dense matrices and a batched reverse-mode tape.

mod gradcheck;
mod mat;
mod scalar;
mod tape;

pub use gradcheck::{
    central_differences, finite_diff_check, max_relative_error, max_tensor_error, REL_ERR_FLOOR,
};
pub use mat::Mat;
pub use scalar::{Dual, Scalar};
pub use tape::{softmax, Gradients, Tape, Var, PRED_CLAMP_HI, PRED_CLAMP_LO};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("empty batch passed to {op}")]
    EmptyBatch { op: &'static str },
}
