use thiserror::Error;

#[derive(Debug, Error)]
pub enum SealError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty mask after resize")]
    EmptyMask,

    #[error("empty mask after resize at layer {layer} ({height}x{width})")]
    EmptyLayerMask {
        layer: usize,
        height: usize,
        width: usize,
    },

    #[error("unknown concept id {0}")]
    UnknownConcept(usize),

    #[error("unknown layer {0}")]
    UnknownLayer(usize),

    #[error("token index {index} out of range for {len} tokens")]
    TokenOutOfRange { index: usize, len: usize },

    #[error("tag error: {0}")]
    Tag(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("prompt has no concept token")]
    MissingConceptToken,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("trajectory {index} failed: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<SealError>,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload")]
    TruncatedPayload,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("embedder failure: {0}")]
    Embedder(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl SealError {
    /// True for failures caused by NaN/inf arising during optimization.
    pub fn is_numerical(&self) -> bool {
        match self {
            SealError::NonFinite(_) => true,
            SealError::Trajectory { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, SealError>;
