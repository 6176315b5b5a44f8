//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough samples/points to perform the operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Operation requires state that has not been established (e.g. fixation onset).
    #[error("state error: {0}")]
    State(String),

    /// Tensor or point-set shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Ray does not intersect the target plane.
    #[error("no intersection: {0}")]
    NoIntersection(String),

    /// Malformed input file; `line` is 1-based.
    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
