use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload-length mismatch: header declares {expected} bytes, payload has {actual}")]
    PayloadLength { expected: usize, actual: usize },

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("empty-region: mask for {area} has no nonzero voxels")]
    EmptyRegion { area: String },

    #[error("bounding box {lo:?}..{hi:?} out of range for dims {dims:?}")]
    BoxOutOfRange {
        lo: [usize; 3],
        hi: [usize; 3],
        dims: [usize; 3],
    },

    #[error("unknown area name {name:?} in record {record}")]
    UnknownArea { name: String, record: String },

    #[error("record {record}: mask for {area} has no report body")]
    MissingReport { record: String, area: String },

    #[error("duplicate sample_id {0}")]
    DuplicateSample(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_sequence_length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config-hash mismatch: checkpoint {checkpoint}, model {model}")]
    ConfigHashMismatch { checkpoint: String, model: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (samples: {samples:?})")]
    NanLoss { step: u64, samples: Vec<String> },

    #[error("prompt error: {0}")]
    Prompt(String),

    #[error("missing stage artifact: {0}")]
    MissingArtifact(String),

    #[error("run directory locked: {0}")]
    Locked(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from invalid user input (as opposed to a runtime
    /// failure while executing a valid request).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownArea { .. }
                | Error::MissingReport { .. }
                | Error::DuplicateSample(_)
                | Error::Manifest(_)
                | Error::MalformedHeader { .. }
                | Error::PayloadLength { .. }
                | Error::InvalidVolume(_)
                | Error::ConfigHashMismatch { .. }
                | Error::MissingArtifact(_)
                | Error::Prompt(_)
        )
    }
}
