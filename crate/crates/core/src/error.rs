use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unsupported dataset `{0}`")]
    UnsupportedDataset(String),

    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientData {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("config hash mismatch: checkpoint has {checkpoint}, config has {config}")]
    ConfigMismatch { checkpoint: String, config: String },

    #[error("distillation diverged at iteration {iteration}: total loss {loss}")]
    Diverged { iteration: u64, loss: f64 },

    #[error("preprocessing mismatch: container {container}, dataset {dataset}")]
    PreprocessMismatch { container: String, dataset: String },

    #[error("training failed: {0}")]
    TrainingFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
