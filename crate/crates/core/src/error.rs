use std::io;

use thiserror::Error;

pub type Result<T, E = TsdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TsdError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate signal: {0}")]
    Degenerate(String),

    #[error("infeasible band spec: {terms} terms requested from {available} frequency indices")]
    InfeasibleSpec { terms: usize, available: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TsdError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TsdError::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        TsdError::Input(msg.into())
    }

    /// Process exit code for this error class: 1 usage, 2 data/config, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            TsdError::Usage(_) => 1,
            TsdError::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
