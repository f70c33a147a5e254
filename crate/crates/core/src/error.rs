use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}: record {record}: {message}")]
    Malformed {
        source_name: String,
        record: usize,
        message: String,
    },

    #[error("{0}: no records")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has no labeled examples after the split")]
    UnrepresentedClass { class: usize },

    /// The embedding has zero norm, so no direction (and no cosine) exists.
    #[error("degenerate instance: zero embedding")]
    DegenerateEmbedding,

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("training diverged in {phase} at epoch {epoch}: {detail}")]
    Divergence {
        phase: String,
        epoch: usize,
        detail: String,
    },

    #[error("total conflict between mass functions (conflict = {0})")]
    TotalConflict(f64),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("id sets differ: {0}")]
    IdMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
