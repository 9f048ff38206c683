//! Numeric substrate: dense `f64` tensors, a reverse-mode tape, Adam, and
//! central-difference gradient checking.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, adam_step_grouped, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{DiffTensor, Tape};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}
