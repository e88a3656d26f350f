use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("attention over an empty key set")]
    EmptyKeys,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error at row {row}: {msg}")]
    Validation { row: usize, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampling diverged at diffusion step t={t}")]
    Divergence { t: usize },

    #[error("forecast/truth misalignment; unmatched keys: {}", .0.join(", "))]
    Misaligned(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("env field file error: {0}")]
    EnvFile(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptyKeys => "empty-keys",
            Error::Config(_) => "config",
            Error::Parse(_) => "parse",
            Error::Validation { .. } => "validation",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non-finite",
            Error::Divergence { .. } => "divergence",
            Error::Misaligned(_) => "misaligned",
            Error::Checkpoint(_) => "checkpoint",
            Error::EnvFile(_) => "env-file",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: {a:?} vs {b:?}"))
}
