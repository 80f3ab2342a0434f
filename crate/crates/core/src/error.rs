use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("build error at {layer}: {msg}")]
    Build { layer: String, msg: String },

    #[error("placement error: {0}")]
    Placement(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("numerical divergence at epoch {epoch} (last good epoch: {last_good:?}): {msg}")]
    Diverged {
        epoch: usize,
        last_good: Option<usize>,
        msg: String,
    },

    #[error("non-finite objective while perturbing {coordinate}")]
    NonFinite { coordinate: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
