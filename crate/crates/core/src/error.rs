use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config field `{field}`: {constraint}")]
    InvalidConfig { field: String, constraint: String },

    #[error("sample {id}: {reason}")]
    Sample { id: String, reason: String },

    #[error("{what} too large: requested {requested}, limit {limit}")]
    Limit {
        what: &'static str,
        requested: usize,
        limit: usize,
    },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("classifier pool is empty")]
    EmptyPool,

    #[error("masker observes layer {0}, which the activation set does not provide")]
    MissingLayer(usize),

    #[error("external infiller failed: {0}")]
    External(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Self::InvalidConfig {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}
