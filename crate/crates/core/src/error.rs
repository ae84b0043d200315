use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown preset `{name}`; valid presets: {}", valid.join(", "))]
    UnknownPreset { name: String, valid: Vec<String> },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing split directory {}", .0.display())]
    MissingSplit(PathBuf),

    #[error("unparsable file names in {}: {}", dir.display(), files.join(", "))]
    UnparsableNames { dir: PathBuf, files: Vec<String> },

    #[error("sampler contract violated: {0}")]
    Sampler(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("metadata out of range: {0}")]
    Metadata(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iter}: {detail}")]
    NonFinite { epoch: i64, iter: usize, detail: String },

    #[error("unsupported layer `{0}` in FLOP walk")]
    UnsupportedLayer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error stems from invalid user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::UnknownPreset { .. } | Error::Metadata(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
