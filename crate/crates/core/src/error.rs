use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input rejected before any work was done.
    #[error("validation error: {0}")]
    Validation(String),

    /// Several independent validation failures, reported together.
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),

    /// The object exists but is not usable for the requested operation.
    #[error("configuration error: {0}")]
    Config(String),

    /// Two inputs that must agree (dimensions, pose indices, lengths) do not.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported {format} version {found} (this build reads up to {supported})")]
    Version {
        format: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::File {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Short category name, used by the CLI to pick an exit code and prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Validation(_) | Error::InvalidConfig(_) => "validation",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Parse { .. } | Error::Version { .. } | Error::Json(_) => "format",
            Error::File { .. } | Error::Io(_) => "io",
            Error::Diverged { .. } => "training",
        }
    }
}
