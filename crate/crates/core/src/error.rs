use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {locus}: {message}")]
    Parse { locus: String, message: String },

    #[error("{0}")]
    Invariant(String),

    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("instance `{0}` has no observed annotator")]
    Unobserved(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("freeze contract violated: {0}")]
    Freeze(String),

    #[error("{0}")]
    Metric(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(locus: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            locus: locus.into(),
            message: message.into(),
        }
    }

    /// Stable machine-readable kind used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Invariant(_) => "invariant",
            Error::UnknownAnnotator(_) => "unknown_annotator",
            Error::EmptySplit(_) => "empty_split",
            Error::Unobserved(_) => "unobserved",
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Alignment(_) => "alignment",
            Error::Missing(_) => "missing",
            Error::Freeze(_) => "freeze",
            Error::Metric(_) => "metric",
        }
    }
}
