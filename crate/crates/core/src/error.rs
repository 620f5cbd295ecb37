use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants are grouped by cause so callers (the CLI in particular) can map
/// them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inputs that must agree (shapes, layouts, pairings) do not.
    #[error("contract error: {0}")]
    Contract(String),

    /// Data failed validation (mask classes, dataset layout).
    #[error("validation error: {0}")]
    Validation(String),

    /// Several per-file validation failures collected together.
    #[error("{} validation error(s): {}", .0.len(), .0.join("; "))]
    ValidationBatch(Vec<String>),

    /// A non-finite value appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Configuration is malformed or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint could not be loaded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Image encode/decode failure.
    #[error("codec error: {0}")]
    Codec(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Codec(e.to_string())
    }
}
