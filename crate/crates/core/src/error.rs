use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
///
/// The variants map one-to-one onto the command-line exit code contract,
/// see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid arguments or configuration supplied by the caller.
    #[error("usage error: {0}")]
    Usage(String),

    /// A physical parameter lies outside its admissible range.
    #[error("range violation: {field} = {value} outside {allowed}")]
    Range {
        field: &'static str,
        value: f64,
        allowed: &'static str,
    },

    /// Shape or dimension mismatch between tensors, models, or datasets.
    #[error("structural error: {0}")]
    Structural(String),

    /// A computation produced NaN or infinity.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The input vector is degenerate for the requested metric.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A file did not match its declared binary or text format.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 1 usage/config, 2 file/format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Range { .. } => 1,
            Error::Structural(_) | Error::Format { .. } | Error::Io { .. } => 2,
            Error::Degenerate(_) | Error::Numeric(_) => 3,
        }
    }
}
