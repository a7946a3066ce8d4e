use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("division guard: divisor {0:e} is below the guard threshold")]
    DivisionGuard(f64),

    #[error("sensor mismatch: donor label from `{donor}` used for a `{record}` record")]
    SensorMismatch { record: String, donor: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("regime/data mismatch: {0}")]
    RegimeMismatch(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for faults caused by non-finite or degenerate numerics.
    pub fn is_numeric_fault(&self) -> bool {
        matches!(self, Error::NumericFault(_))
    }
}
