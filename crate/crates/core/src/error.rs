use std::path::Path;

use hgere_autodiff::checkpoint::CheckpointError;
use hgere_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("document {doc}{}: {msg}", sentence.map(|s| format!(" sentence {s}")).unwrap_or_default())]
    Validation {
        doc: String,
        sentence: Option<usize>,
        msg: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing embedding for key {0}")]
    MissingKey(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures of the numeric core rather than of inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Tensor(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
