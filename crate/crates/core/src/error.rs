use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or code shapes that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar parameter outside its valid range (r < 0, alpha <= 0, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An operation invoked in the wrong order, e.g. backward before forward.
    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Configuration failed validation; one entry per offending field.
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Malformed text input; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}, r = {r}, alpha = {alpha}")]
    Divergence {
        iteration: usize,
        loss: f64,
        r: f64,
        alpha: f64,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
