//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by dataset, model, and training operations.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class id {got} out of range (expected 0..{num_classes})")]
    ClassOutOfRange { got: usize, num_classes: usize },

    #[error("{context} must not be empty")]
    Empty { context: &'static str },

    #[error(
        "spatial dims {h}x{w} not divisible by {divisor}; pad to at least {pad_h}x{pad_w}"
    )]
    Indivisible {
        h: usize,
        w: usize,
        divisor: usize,
        pad_h: usize,
        pad_w: usize,
    },

    #[error("dilation rate {rate} exceeds feature spatial extent {extent}")]
    DilationTooLarge { rate: usize, extent: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing modality '{0}' in volume stack")]
    MissingModality(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
