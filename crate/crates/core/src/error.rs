use thiserror::Error;

/// Errors produced by the network, data pipeline and persistence layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Architectural or shape configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called outside its contract (wrong loss shape, bad input size).
    #[error("usage error: {0}")]
    Usage(String),

    /// Ground-truth data violates its domain (e.g. a label out of range).
    #[error("data error: {0}")]
    Data(String),

    /// A binary file could not be decoded.
    #[error("load error at byte {offset}: {reason}")]
    Load { offset: u64, reason: String },

    /// Training produced a non-finite objective.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
