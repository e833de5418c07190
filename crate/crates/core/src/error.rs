use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{file}: line {line}: {msg}")]
    Parse { file: String, line: usize, msg: String },

    #[error("record `{record}`: {msg}")]
    Validation { record: String, msg: String },

    #[error("non-finite value in `{component}`")]
    NonFinite { component: String },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing input file: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Validation-type failures (bad inputs) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::Shape(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::MissingInput(_)
                | Error::Checkpoint(_)
        )
    }
}
