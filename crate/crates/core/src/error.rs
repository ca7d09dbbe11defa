use std::path::PathBuf;

use numkit::NumError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, DsdpError>;

#[derive(Debug, Error)]
pub enum DsdpError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("simulation: {0}")]
    Sim(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DsdpError {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::File {
            path: path.into(),
            source,
        }
    }
}
