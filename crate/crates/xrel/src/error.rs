//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum XrelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("singular matrix in {context}")]
    Singular { context: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("fixed-point iteration did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        residual: f64,
        iterations: usize,
        /// Best iterate reached, cell-major q*q entries, so callers can inspect it.
        best: Box<crate::field::ExtendedField>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("internal: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, XrelError>;
