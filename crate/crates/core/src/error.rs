use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("graph state error: {0}")]
    State(String),

    #[error(
        "resolution {resolution} is too low for cutoff of {modes} modes: need at least {required} \
         grid points per axis"
    )]
    ResolutionTooLow {
        resolution: usize,
        modes: usize,
        required: usize,
    },

    #[error("resolution {resolution} is not admissible: {reason}; admissible resolutions: {admissible}")]
    InadmissibleResolution {
        resolution: usize,
        reason: String,
        admissible: String,
    },

    #[error("truncation error: {requested} modes requested but only {available} are representable at r={resolution}")]
    Truncation {
        requested: usize,
        available: usize,
        resolution: usize,
    },

    #[error("singularity: {0}")]
    Singular(String),

    #[error("ingestion error in `{entry}`: {reason}")]
    Ingestion { entry: String, reason: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
