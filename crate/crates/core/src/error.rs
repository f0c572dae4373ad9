use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown method `{0}` (expected vanilla, smoothgrad or gradcam)")]
    UnknownMethod(String),
    #[error("unknown view `{0}` (expected global, local or global-local)")]
    UnknownView(String),
    #[error("unknown model kind `{0}` (expected stan or cnn)")]
    UnknownModel(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable category, one per failure class.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Format(_)) => "malformed-tensor",
            Error::Tensor(TensorError::Io(_)) => "io",
            Error::Tensor(_) => "shape-mismatch",
            Error::Config(_) => "invalid-config",
            Error::Manifest(_) => "malformed-manifest",
            Error::Checkpoint(_) => "malformed-checkpoint",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::UnknownMethod(_) => "unknown-method",
            Error::UnknownView(_) => "unknown-view",
            Error::UnknownModel(_) => "unknown-model",
            Error::Argument(_) => "invalid-argument",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
