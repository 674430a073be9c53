use std::path::PathBuf;

use thiserror::Error;

use crate::data::analysis::AnalysisError;
use crate::data::episode_io::EpisodeIoError;
use crate::data::profile::ProfileError;
use crate::data::schema::SchemaError;
use crate::kv::KvError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::strategy::StrategyError;
use crate::tasks::TaskError;
use crate::tensor::TensorError;
use crate::train::TrainError;

/// Any failure surfaced by the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no results found under {0}")]
    NoResults(PathBuf),
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    EpisodeIo(#[from] EpisodeIoError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Bad input data or configuration, as opposed to a failure while
    /// running.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::NoResults(_)
                | Error::Kv(_)
                | Error::Profile(_)
                | Error::Schema(_)
                | Error::EpisodeIo(_)
                | Error::Analysis(_)
                | Error::Task(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
