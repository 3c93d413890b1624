//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CkdaError {
    /// A configuration value is out of its valid domain.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Two operands disagree on shape.
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    /// An operation was invoked in a model state that does not support it.
    #[error("invalid state: {0}")]
    State(String),

    /// Degenerate numeric input, e.g. a zero-norm feature row.
    #[error("numeric error at row {row}: {reason}")]
    Numeric { row: usize, reason: String },

    /// Evaluation protocol violated (e.g. a query without relevant gallery items).
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl CkdaError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CkdaError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        CkdaError::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

impl From<serde_json::Error> for CkdaError {
    fn from(e: serde_json::Error) -> Self {
        CkdaError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CkdaError>;
