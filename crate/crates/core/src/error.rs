use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid detection {index}: {reason}")]
    InvalidDetection { index: usize, reason: String },

    #[error("detection {index} has no appearance embedding and no backbone input")]
    MissingAppearance { index: usize },

    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    EmbeddingDim { expected: usize, found: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("no warper registered under `{0}`")]
    UnregisteredWarper(String),

    #[error("non-finite loss at batch {batch}")]
    NanLoss { batch: usize },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { expected: u32, found: u32 },

    #[error("inconsistent keypoint count in frame {frame}: expected {expected}, found {found}")]
    KeypointCount {
        frame: u64,
        expected: usize,
        found: usize,
    },

    #[error("non-monotone frame index: {previous} followed by {next}")]
    NonMonotoneFrames { previous: u64, next: u64 },

    #[error("length mismatch: {results} result frames vs {gt} ground-truth frames")]
    LengthMismatch { results: usize, gt: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The first violated configuration invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("alpha out of range: {0} not in [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("tau_dup out of range: {0} not in [0, 1]")]
    TauDupOutOfRange(f64),
    #[error("embedding dim must be positive")]
    ZeroEmbeddingDim,
    #[error("{0} must be positive")]
    ZeroDim(&'static str),
    #[error("expected {expected} OKS kappas, found {found}")]
    KappaCount { expected: usize, found: usize },
    #[error("OKS kappa {index} must be strictly positive, found {value}")]
    NonPositiveKappa { index: usize, value: f64 },
    #[error("heatmap kernel width must be positive and finite, found {0}")]
    KernelWidth(f64),
    #[error("pluggable warp mode requires a warper name")]
    EmptyWarperName,
}
