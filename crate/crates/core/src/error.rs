use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training engine.
///
/// Variants are grouped so the CLI can map them onto its exit codes:
/// configuration-like errors, data/IO errors, and calibration failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("state error: {0}")]
    State(String),

    #[error("calibration error: {message} (epsilon at sigma = {sigma_max}: {achievable_epsilon})")]
    Calibration {
        message: String,
        sigma_max: f64,
        achievable_epsilon: f64,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
