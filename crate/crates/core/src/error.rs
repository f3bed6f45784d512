use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller violated a shape or range contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("failed to load `{tensor}`: {reason}")]
    Load { tensor: String, reason: String },

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("non-finite loss at iteration {iteration} ({value})")]
    NonFiniteLoss { iteration: usize, value: f64 },

    #[error("invalid recipe field `{field}`: {reason}")]
    Recipe { field: String, reason: String },

    #[error("image error for {path:?}: {reason}")]
    Image { path: Option<PathBuf>, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn recipe(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Recipe {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
