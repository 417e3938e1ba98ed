use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed {format} data at byte {offset}: {reason}")]
    Format { format: &'static str, offset: u64, reason: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("config error at {location} (key `{key}`): {reason}")]
    Config { key: String, location: String, reason: String },

    #[error("{path}: {source}")]
    Io { path: PathBuf, #[source] source: std::io::Error },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
