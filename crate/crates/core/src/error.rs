use std::path::PathBuf;

use thiserror::Error;

use crate::providers::ProviderError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("tool dispatch failed: {0}")]
    ToolDispatch(String),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: &'static str, message: String },

    #[error("dataset layout error: {0}")]
    Layout(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn stage(stage: &'static str, message: impl Into<String>) -> Self {
        Error::Stage {
            stage,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
