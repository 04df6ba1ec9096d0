//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("corpus generation failed: {0}")]
    Corpus(String),
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid patch plan: {0}")]
    InvalidPlan(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("weights format error: {0}")]
    WeightsFormat(String),
    #[error("experiment error: {0}")]
    Experiment(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for CLI use: 3 for numeric divergence, 2 for
    /// everything else (validation, I/O, format).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
