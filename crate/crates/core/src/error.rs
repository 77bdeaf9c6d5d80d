use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {context}{}", round.map(|r| format!(" (round {r})")).unwrap_or_default())]
    NonFinite { context: String, round: Option<usize> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("ingestion error in {} at offset {offset}: {reason}", file.display())]
    Ingestion {
        file: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical solve failed: {0}")]
    Solve(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches a round index to a non-finite error.
    pub fn at_round(self, round: usize) -> Self {
        match self {
            Error::NonFinite { context, .. } => Error::NonFinite {
                context,
                round: Some(round),
            },
            other => other,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
