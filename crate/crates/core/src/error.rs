use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rectangle ({x0},{y0},{x1},{y1}): {reason}")]
    InvalidRect {
        x0: i64,
        y0: i64,
        x1: i64,
        y1: i64,
        reason: &'static str,
    },
    #[error("unknown class label `{0}`")]
    UnknownLabel(String),
    #[error("class index {0} out of range")]
    LabelOutOfRange(usize),
    #[error("slide `{slide_id}` region ({x0},{y0},{x1},{y1}) unreadable: {reason}")]
    RegionUnreadable {
        slide_id: String,
        x0: i64,
        y0: i64,
        x1: i64,
        y1: i64,
        reason: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("prompt rejected: {0}")]
    Prompt(String),
    #[error("adaptation rejected: {0}")]
    Adaptation(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
