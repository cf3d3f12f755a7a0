use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("backward called before any forward op was recorded")]
    BackwardBeforeForward,

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    Diverged { epoch: usize, term: String },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("graph has {nodes} nodes, brute force is limited to {limit}")]
    TooLarge { nodes: usize, limit: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
