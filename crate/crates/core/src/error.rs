use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("frame has no tissue pixels (every pixel is masked)")]
    AllMasked,

    #[error("empty initialization: no unmasked pixel with valid depth")]
    EmptyInitialization,

    #[error("stale render cache: gaussian parameters changed since the forward pass")]
    StaleCache,

    #[error("render output carries no backward cache")]
    MissingCache,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("frame {index}: {message}")]
    Frame { index: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("empty path")]
    EmptyPath,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
