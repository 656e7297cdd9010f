use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument falls outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operand shapes or lengths disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A Gram matrix is singular or too ill-conditioned to invert.
    #[error("ill-conditioned matrix: {what} (condition ratio {ratio:e} below {tol:e})")]
    Conditioning { what: String, ratio: f64, tol: f64 },

    /// Malformed serialized input.
    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    /// A setup failed validation; every violated invariant is listed.
    #[error("invalid setup: {}", .0.join("; "))]
    InvalidSetup(Vec<String>),

    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("optimization failed: {message} (best iterate {best:?}, gradient norm {grad_norm:e})")]
    Optimization {
        message: String,
        best: Vec<f64>,
        grad_norm: f64,
    },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
