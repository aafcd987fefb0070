//! Crate-wide error type.
//!
//! Exit-code mapping in the CLI relies on the variant split: `Io` and
//! `Corrupt` are I/O-class failures, everything else is a contract or
//! configuration violation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, named on both sides so the caller can see
    /// which operands collided.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (CSV schema, timestamps, value ranges).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint archive failed integrity checks.
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    /// Checkpoint archive is well-formed but missing expected content.
    #[error("checkpoint schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
