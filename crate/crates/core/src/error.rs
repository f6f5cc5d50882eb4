use thiserror::Error;

/// Errors raised anywhere in the attention pipeline, from graph
/// construction through training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate undirected edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("feature dimension mismatch: expected {expected}, found {found}")]
    FeatureDimMismatch { expected: usize, found: usize },
    #[error("not a permutation of 0..{0}")]
    InvalidPermutation(usize),
    #[error("mask length {found} does not match expected {expected}")]
    MaskLength { expected: usize, found: usize },
    #[error("base graph size {0} is below the minimum of 4")]
    SizeTooSmall(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensor handle does not belong to this tape")]
    DetachedTensor,
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),

    #[error("segment {0} is empty")]
    EmptySegment(usize),
    #[error("ratio r={0} must lie in (0, 1]")]
    InvalidRatio(f64),
    #[error("marginal normalization underflowed to zero")]
    ZeroMarginal,
    #[error("segment {0} has no edges")]
    SegmentTooSmall(usize),
    #[error("convergence trace is degenerate: {0}")]
    DegenerateTrace(String),

    #[error("score normalization needs at least 2 edges, got {0}")]
    TooFewEdges(usize),
    #[error("label {label} invalid for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("ground-truth mask missing")]
    MissingMask,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed input: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
