use std::path::PathBuf;

use gdcn_tensor::TensorError;
use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::optim::OptimError;
use crate::sgdf::SgdfError;

#[derive(Debug, Error)]
pub enum GdcnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sgdf(#[from] SgdfError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{phase} epoch {epoch}, batch {batch}: {msg}")]
    NonFinite {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        msg: String,
    },
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse classification used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Numerical,
    Io,
}

impl GdcnError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        GdcnError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| GdcnError::Io { path, source }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            GdcnError::NonFinite { .. } | GdcnError::Optim(OptimError::NonFiniteGradient { .. }) => {
                ErrorKind::Numerical
            }
            GdcnError::Tensor(TensorError::NonFinite { .. }) => ErrorKind::Numerical,
            GdcnError::Sgdf(SgdfError::Tensor(TensorError::NonFinite { .. })) => ErrorKind::Numerical,
            GdcnError::Io { .. } | GdcnError::Data(DataError::Io { .. }) => ErrorKind::Io,
            _ => ErrorKind::Config,
        }
    }
}

pub type Result<T, E = GdcnError> = std::result::Result<T, E>;
