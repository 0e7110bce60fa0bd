use std::path::PathBuf;

/// Errors raised anywhere in the detection pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Two operands or a tensor and its declared contract disagree on shape.
    #[error("dimension mismatch: {0}")]
    Shape(String),

    /// A hyperparameter or argument is outside its legal range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A weight container is malformed or does not match its manifest.
    #[error("weight container error at `{entry}`: {reason}")]
    Container { entry: String, reason: String },

    /// A gradient contains NaN or infinity.
    #[error("non-finite gradient in tensor `{0}`")]
    NonFinite(String),

    /// Dataset layout or content problem.
    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    /// A metric is undefined for the given input.
    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn container(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Container {
            entry: entry.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dataset(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
