use std::path::PathBuf;

/// Errors produced by the texture synthesis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mode mismatch: expected {expected} model, found {found}")]
    ModeMismatch { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint record `{name}`: {reason}")]
    Record { name: String, reason: String },

    #[error("delta was produced for checkpoint {expected}, but the supplied checkpoint hashes to {found}")]
    HashMismatch { expected: String, found: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training aborted ({reason}); diagnostic snapshot written to {}", snapshot.display())]
    TrainingAborted { snapshot: PathBuf, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing feature extractor artifact: set `{key}` (or pass --extractor) to a weights file, or use `builtin`")]
    MissingExtractor { key: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Torch(#[from] tch::TchError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
