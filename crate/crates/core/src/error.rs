//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown class id {0} in label map")]
    UnknownClassId(u32),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Training aborted on a non-finite loss; the seed identifies the batch.
    #[error("non-finite loss at epoch {epoch}, batch seed {batch_seed}")]
    NonFiniteLoss { epoch: usize, batch_seed: u64 },

    #[error("weight file: bad magic (expected \"DGW1\")")]
    WeightMagic,

    #[error("weight file: manifest mismatch: {0}")]
    WeightManifest(String),

    #[error("weight file: truncated payload (expected {expected} bytes, got {got})")]
    WeightTruncated { expected: usize, got: usize },

    #[error("weight file: payload checksum mismatch")]
    WeightChecksum,

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("weight file: malformed header: {0}")]
    WeightHeader(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
