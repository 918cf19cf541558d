use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (shape mismatch, invalid
    /// argument range, non-finite input where finiteness is required).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Unknown domain key; the message lists the known domains.
    #[error("unknown domain {key:?}; known domains: {known:?}")]
    UnknownDomain { key: String, known: Vec<String> },

    /// Invalid configuration (bad key, bad value, missing field).
    #[error("configuration error: {0}")]
    Config(String),

    /// A persisted artifact is damaged or does not match this build.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Loaded state conflicts with the requested configuration.
    #[error("config conflict: {0}")]
    ConfigConflict(String),

    /// Numerical conditioning failure (e.g. covariance far from PSD).
    #[error("numerical conditioning error: {0}")]
    Numerical(String),

    /// A loss became non-finite during training; carries the diagnostic
    /// record of the failing iteration.
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

/// Bail with a contract violation unless `cond` holds.
macro_rules! ensure_contract {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}
pub(crate) use ensure_contract;
