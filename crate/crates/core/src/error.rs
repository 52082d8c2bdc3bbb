use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("asset error: {0}")]
    Asset(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged in stage `{stage}` at step {step}: {detail}")]
    Training {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("sampling produced non-finite values at step {step}")]
    Sampling { step: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("missing dependency: stage `{required}` must run first ({detail})")]
    Dependency { required: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::Dependency { .. } | Error::Integrity(_) => 3,
            Error::Training { .. } | Error::Sampling { .. } => 4,
            Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) | Error::Json(_) => 5,
            Error::Corpus(_) | Error::Asset(_) => 5,
            Error::Dimension(_) | Error::Tensor(_) => 1,
        }
    }
}
