//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HgError>;

#[derive(Debug, Error)]
pub enum HgError {
    #[error("invalid length: {0}")]
    InvalidLength(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A spectral bin is too close to zero for a stable reciprocal.
    #[error("near-singular spectrum: bin {bin} has magnitude {magnitude:.3e} < {epsilon:.3e}")]
    NearSingular {
        bin: usize,
        magnitude: f64,
        epsilon: f64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    /// An API contract was violated (e.g. stale activation cache).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Checkpoint file failures, one variant per failure class so callers can
/// distinguish them.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated checkpoint file")]
    Truncated,

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl HgError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        HgError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
