//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LpsError {
    /// Shape or rank mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument (bad stride, temperature, extent, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Autodiff misuse (non-scalar loss, double backward, ...).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Tensor container or manifest format violation.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset generation/validation failure.
    #[error("data error: {0}")]
    Data(String),

    /// Training aborted (divergence guard, empty dataset, ...).
    #[error("training error: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LpsError>;

impl LpsError {
    pub fn shape(msg: impl Into<String>) -> Self {
        LpsError::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        LpsError::Invalid(msg.into())
    }
}
