//! Reverse-mode automatic differentiation over dense `f64` buffers, with
//! the layer primitives of a DCGAN and an Adam optimizer.

mod adam;
mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{Activation, BatchNormMode, BatchNormState, Tape, Var, BCE_EPS, BN_EPS, BN_MOMENTUM};
pub use tensor::{ParamId, ParamStore, Precision, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} would produce an empty output")]
    EmptyOutput { op: &'static str },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("binary cross-entropy target must be 0 or 1, got {0}")]
    InvalidTarget(f64),
}

pub type Result<T> = std::result::Result<T, AutogradError>;
