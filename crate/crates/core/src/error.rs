use std::path::PathBuf;

use empdial_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("unknown emotion `{label}`; valid emotions: {valid}")]
    UnknownEmotion { label: String, valid: String },
    #[error("unknown intent `{label}`; valid intents: {valid}")]
    UnknownIntent { label: String, valid: String },
    #[error("dialogue `{id}`: {message}")]
    InvalidDialogue { id: String, message: String },
    #[error("{0} id {1} out of range")]
    LabelOutOfRange(&'static str, usize),
    #[error("prior matrix: {0}")]
    Prior(String),
    #[error("model input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("metrics: {0}")]
    Metric(String),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
