use std::path::PathBuf;

use thiserror::Error;

use crate::engine::EngineError;
use crate::eval::MetricError;
use crate::model::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("{file}:{line}: node id {id} out of range for {n} nodes")]
    NodeOutOfRange {
        file: PathBuf,
        line: usize,
        id: usize,
        n: usize,
    },
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training diverged at epoch {epoch}; last finite losses: {last}")]
    Diverged { epoch: usize, last: Box<LossBreakdown> },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::Diverged { .. }
                | Self::Engine(EngineError::NonFinite { .. })
                | Self::Engine(EngineError::NonFiniteGradient(_))
        )
    }
}
