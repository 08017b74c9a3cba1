use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} at byte offset {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: u64,
        reason: String,
    },

    #[error("invalid header field `{field}`: {reason}")]
    Header { field: String, reason: String },

    #[error("payload length mismatch: header implies {expected} bytes, found {found}")]
    PayloadLength { expected: u64, found: u64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("channel {channel} is constant ({value}); cannot normalize")]
    DegenerateChannel { channel: usize, value: f32 },

    #[error("brain mask is empty")]
    EmptyMask,

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("missing cache for backward pass through {layer}")]
    MissingCache { layer: String },

    #[error("batch normalization has no running statistics; run at least one training step")]
    UntrainedBatchNorm,

    #[error("balanced split not found after {attempts} attempts")]
    SplitUnattainable { attempts: usize },

    #[error("no eligible patch centers")]
    NoEligibleCenter,

    #[error("ROC needs both classes; got {positives} patients and {negatives} controls")]
    SingleClass { positives: usize, negatives: usize },

    #[error("region `{roi}` has no covered voxels")]
    EmptyRoi { roi: String },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("stage `{stage}` failed (partial state in {path}): {source}")]
    Stage {
        stage: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("validation failed: {0}")]
    Validation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        got: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
