use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("layer `{layer}`: {message}")]
    LayerState { layer: String, message: String },

    #[error("layer `{0}`: running statistics are uninitialized (no train-mode forward yet)")]
    UninitializedStatistics(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("image `{path}`: {message}")]
    Image { path: PathBuf, message: String },

    #[error("bad archive magic: expected \"CVNW\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported archive version {0}")]
    BadVersion(u32),

    #[error("archive truncated: {0}")]
    Truncated(String),

    #[error("archive header: {0}")]
    Header(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}` in archive")]
    ExtraTensor(String),

    #[error("tensor `{name}` shape mismatch: expected {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
