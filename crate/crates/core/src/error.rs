use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BuddError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BuddError {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{what}: expected {expected} bytes, found {found}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("duplicate scene {0}")]
    DuplicateScene(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("observation dated {date} is not after {previous}")]
    OutOfOrder {
        date: chrono::NaiveDate,
        previous: chrono::NaiveDate,
    },

    #[error("tile {tile} failed at stage `{stage}`")]
    Stage {
        tile: usize,
        stage: &'static str,
        #[source]
        source: Box<BuddError>,
    },
}

impl BuddError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BuddError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        BuddError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        BuddError::Invalid(msg.into())
    }
}
