use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Segmentation does not tile the sentence.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("illegal BIOES sequence: violation at position {position}")]
    IllegalTags { position: usize },

    /// A hypothesis that has zero probability under the model (illegal label
    /// sequence, segment outside the lattice, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// API misuse: backward without forward, incompatible variant, ...
    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
