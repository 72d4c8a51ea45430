use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error at {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("mask preparation failed for {image}: {message}")]
    Mask { image: String, message: String },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("backbone error: {0}")]
    Backbone(String),

    #[error("real backend required: {0}")]
    BackendUnavailable(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("non-finite loss in {stage} at step {step}: {report}")]
    NonFinite {
        stage: String,
        step: usize,
        report: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("scorer error: {0}")]
    Scorer(String),

    #[error("ablation variant `{variant}`: {source}")]
    Variant {
        variant: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user input (bad config, missing files)
    /// rather than a failure while running a stage.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Variant { source, .. } => source.is_usage(),
            _ => matches!(
                self,
                Error::Config { .. } | Error::Ingestion { .. } | Error::Io { .. } | Error::Yaml(_)
            ),
        }
    }
}
