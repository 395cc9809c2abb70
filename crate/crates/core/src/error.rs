use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate image_id `{0}`")]
    DuplicateImageId(String),

    #[error("image `{image_id}`: {message}")]
    Annotation { image_id: String, message: String },

    #[error("failed to decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("replay table is missing {} key(s): {}", .0.len(), format_keys(.0))]
    ReplayMiss(Vec<String>),

    #[error("conflicting response for {key}: stored {stored}, new {new}")]
    ResponseConflict {
        key: String,
        stored: String,
        new: String,
    },

    #[error("unrecognized answer: {0:?}")]
    UnparseableAnswer(String),

    #[error("backend request failed: {0}")]
    Backend(String),

    #[error("too many unreadable images: {skipped} of {total}")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_keys(keys: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut out = keys.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if keys.len() > SHOWN {
        out.push_str(&format!(", ... ({} more)", keys.len() - SHOWN));
    }
    out
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
