//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Two tensor shapes that should have been compatible were not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A shape/axis/index argument was invalid for the given tensor.
    #[error("invalid dimension in {op}: {msg}")]
    InvalidDimension { op: &'static str, msg: String },

    /// An optimizer step found a parameter without a populated gradient.
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    /// Configuration value out of its legal range.
    #[error("invalid config: {0}")]
    Config(String),

    /// Batch/label structure violated a sampler or loss precondition.
    #[error("invalid batch: {0}")]
    Batch(String),

    /// A metric was asked to evaluate a degenerate input.
    #[error("degenerate metric input: {0}")]
    Degenerate(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    /// Binary container parse/validation failure.
    #[error("tensor container: {0}")]
    Container(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
