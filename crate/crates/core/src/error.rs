use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid grid or training configuration.
    #[error("config: {0}")]
    Config(String),

    /// Caller passed arguments violating an operation's preconditions.
    #[error("input: {0}")]
    Input(String),

    /// A load failed because the on-disk data is malformed.
    #[error("load {path}: {reason} (offset {offset})")]
    Load {
        path: PathBuf,
        reason: String,
        offset: u64,
    },

    /// A non-finite value surfaced during training.
    #[error("non-finite {what} at ray {ray}")]
    NonFinite { what: &'static str, ray: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
