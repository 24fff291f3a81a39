use thiserror::Error;
use vitdp_collectives::CommError;
use vitdp_core::{DataError, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("unsupported feature: {0}")]
    Unsupported(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("worker {who} failed: {status} (log: {log})")]
    WorkerFailed {
        /// Rank, when rendezvous got far enough to assign one.
        rank: Option<usize>,
        who: String,
        status: String,
        log: std::path::PathBuf,
    },
    #[error("parameters diverged across ranks after epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error("metrics file: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
