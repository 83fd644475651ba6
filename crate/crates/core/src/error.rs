use thiserror::Error;

use crate::autodiff::GraphError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::networks::NetError;
use crate::phantom::PhantomError;
use crate::training::TrainError;
use crate::volume::VolumeError;

/// Crate-level error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed metadata in {path}: {message}")]
    Meta { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
