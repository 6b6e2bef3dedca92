//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or grid dimensions do not match what an operation expects.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input values violate a documented contract (ranges, emptiness, labels).
    #[error("validation error: {0}")]
    Validation(String),

    /// A run configuration is invalid; the message aggregates every offending field.
    #[error("config error: {0}")]
    Config(String),

    /// A metric is undefined for the given inputs (e.g. single-class AUROC).
    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Image {
        context: String,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn image(context: impl Into<String>, source: image::ImageError) -> Self {
        Error::Image { context: context.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
