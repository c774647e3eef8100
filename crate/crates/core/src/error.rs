use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("invalid split: {0}")]
    Split(String),

    #[error("synthetic generator: {0}")]
    Synth(String),

    #[error("featurization: {0}")]
    Featurize(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch for `{tensor}`: expected {expected:?}, found {found:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dialogue has {len} utterances but max_dialogue_len is {max}; split the dialogue into chunks or raise max_dialogue_len")]
    DialogueTooLong { len: usize, max: usize },

    #[error("non-finite value in layer `{0}`")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
