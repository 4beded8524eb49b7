use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("numeric error in {op}: non-finite value")]
    Numeric { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing prerequisite {path}: run `{stage}` first")]
    MissingPrerequisite { stage: &'static str, path: PathBuf },

    #[error("stale prerequisite {path}: produced by a different config, rerun `{stage}`")]
    StalePrerequisite { stage: &'static str, path: PathBuf },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
