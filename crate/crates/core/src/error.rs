//! Crate-wide error type.

use std::io;

use thiserror::Error;

use crate::vocab::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token {id} at position {position} is not a text token")]
    Classification { position: usize, id: TokenId },

    #[error("template field missing: {field}")]
    Template { field: &'static str },

    #[error("malformed image block at token {position}: {reason}")]
    Parse { position: usize, reason: String },

    #[error("capacity exceeded: need {requested} positions, capacity is {capacity}")]
    Capacity { requested: usize, capacity: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps the error with the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

/// Failures specific to reading checkpoint containers. Each failure mode is distinct so
/// callers can tell a foreign file from a damaged one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checksum mismatch")]
    Checksum,
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed header: {0}")]
    Header(String),
}
