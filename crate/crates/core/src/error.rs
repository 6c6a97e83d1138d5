use std::path::PathBuf;

use thiserror::Error;

use crate::data::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, range, length).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or gradient overflowed before any training context was known.
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },

    /// A loss or gradient overflowed during training.
    #[error("numerical failure at step {step} (batch size {batch_size}, loss {loss}): non-finite {what}")]
    Numerical {
        step: u64,
        batch_size: usize,
        loss: f64,
        what: &'static str,
    },

    /// `L * alpha >= 2`: no batch size yields an expected decrease.
    #[error("infeasible step: L * alpha = {0} must be < 2")]
    InfeasibleStep(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("all {0} grid points failed")]
    AllGridPointsFailed(usize),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
