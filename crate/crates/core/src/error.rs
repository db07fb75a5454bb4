use std::path::PathBuf;

use ehrseq_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid ICD code {0:?}")]
    InvalidCode(String),
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed container: {0}")]
    Container(String),
    #[error("vocabulary hash mismatch: checkpoint has {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("feature schema mismatch: model has {found}, data has {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("unknown policy field {0:?}")]
    UnknownPolicyField(String),
    #[error("both classes are required, got only {0}")]
    SingleClass(u8),
    #[error("sequence of {len} positions exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("singular system: {0}")]
    Singular(String),
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
