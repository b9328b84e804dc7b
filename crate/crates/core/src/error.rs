use std::path::PathBuf;

use latent_bridge_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("idx: {0}")]
    Idx(String),
    #[error("data: {0}")]
    Data(String),
    #[error("config line {line}{}: {msg}", key.as_ref().map(|k| format!(" (`{k}`)")).unwrap_or_default())]
    Config {
        line: usize,
        key: Option<String>,
        msg: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    MissingPrerequisite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingPrerequisite(_) => 2,
            Error::Divergence(_) | Error::Tensor(TensorError::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Turns a non-finite op failure inside a training loop into a divergence
/// diagnostic.
pub(crate) fn diverged(stage: &str, step: usize) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Divergence(format!(
            "{stage}: non-finite value in `{op}` at step {step}"
        )),
        other => other,
    }
}
