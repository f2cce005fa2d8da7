use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {0}")]
    Numeric(String),

    #[error("index {index} out of range (limit {limit})")]
    Bounds { index: usize, limit: usize },

    #[error("dataset is empty after filtering")]
    EmptyAfterFiltering,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no users with ground truth in the {0} phase")]
    NoEvaluableUsers(&'static str),

    #[error("bad checkpoint: {0}")]
    Format(String),

    #[error("epoch {epoch}{}: {source}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    Training {
        epoch: usize,
        batch: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
