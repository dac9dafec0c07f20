use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("cross entropy: every position is masked out")]
    EmptyLoss,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    VocabRange { id: usize, size: usize },

    #[error("invalid config: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("checkpoint/config mismatch on {field}: checkpoint has {checkpoint}, config has {config}")]
    ConfigMismatch {
        field: String,
        checkpoint: String,
        config: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    NamedShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },

    #[error("record {id} rejected: {msg}")]
    RecordRejected { id: String, msg: String },

    #[error("{0}")]
    Data(String),

    #[error("duplicate positive id `{0}` in contrastive batch")]
    DuplicatePositive(String),

    #[error("step {step}: loss is not finite ({value})")]
    Diverged { step: usize, value: f64 },

    #[error("gradient cache: re-encoded embedding {index} differs from cached by {diff:e}")]
    CacheMismatch { index: usize, diff: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
