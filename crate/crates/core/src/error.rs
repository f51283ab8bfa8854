use thiserror::Error;

/// Errors raised across the manipulation pipeline.
///
/// The `Display` prefix of each variant is a stable keyword that the CLI
/// surfaces verbatim, so scripts can match on it.
#[derive(Debug, Error)]
pub enum HgmError {
    #[error("dim-mismatch: {0}")]
    DimMismatch(String),
    #[error("degenerate-vector: {0}")]
    DegenerateVector(String),
    #[error("pca-rank: requested {k} components from a {rows}x{cols} matrix")]
    PcaRank { k: usize, rows: usize, cols: usize },
    #[error("missing-context: {0}")]
    MissingContext(String),
    #[error("no-provider: no provider registered for category {0}")]
    NoProvider(String),
    #[error("no-features: {0}")]
    NoFeatures(String),
    #[error("missing-payload: {0}")]
    MissingPayload(String),
    #[error("degenerate-reference: target direction vector has norm {0:.3e}")]
    DegenerateReference(f64),
    #[error("head-split: model width {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("shape-mismatch: {0}")]
    Shape(String),
    #[error("non-scalar-loss: loss has shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite: {0}")]
    NonFinite(String),
    #[error("diverged: loss became {0} at step {1}")]
    Diverged(f32, u64),
    #[error("unknown-task: {0}")]
    UnknownTask(String),
    #[error("expert-failed: {0}")]
    ExpertFailed(String),
    #[error("checkpoint-task-mismatch: {0}")]
    CheckpointTaskMismatch(String),
    #[error("invalid-config: {0}")]
    InvalidConfig(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HgmError>;
