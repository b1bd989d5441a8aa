use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("connection #{index} ({from} -> {to}) references an unknown segment")]
    DanglingConnection {
        index: usize,
        from: String,
        to: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("segment ids do not match the network; unknown: {unknown:?}, missing: {missing:?}")]
    SegmentMismatch {
        unknown: Vec<String>,
        missing: Vec<String>,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("degenerate result: {0}")]
    Degenerate(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
