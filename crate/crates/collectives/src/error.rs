use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommError {
    #[error("rendezvous failed: {0}")]
    Rendezvous(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("barrier timed out waiting for ranks {missing:?}")]
    Deadlock { missing: Vec<usize> },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
