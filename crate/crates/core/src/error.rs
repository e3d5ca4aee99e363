use std::path::PathBuf;

use thiserror::Error;

use crate::config::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(ValidationReport),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("series shorter than bin count ({len} < {bins})")]
    SeriesTooShort { len: usize, bins: usize },
    #[error("degenerate masking: {masked} of {total} tokens would be masked")]
    DegenerateMasking { masked: usize, total: usize },
    #[error("empty model: no tokens to process")]
    EmptyModel,
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("unsupported format version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error("truncated file {path}")]
    Truncated { path: PathBuf },
    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of the filesystem or of on-disk formats, as opposed
    /// to configuration and argument errors.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Json { .. }
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Truncated { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
