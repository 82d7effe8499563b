use thiserror::Error;

/// Errors shared across the library.
#[derive(Error, Debug)]
pub enum OedError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("numerical validity: {0}")]
    NumericalValidity(String),

    #[error("factorization failed: {0}")]
    Factorization(&'static str),

    #[error("{failed} of {total} per-sample solves failed; aggregate rejected")]
    AggregateFailure { failed: usize, total: usize },

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("container error: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OedError>;
