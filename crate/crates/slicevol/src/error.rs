use thiserror::Error;

/// Errors shared across the pipeline.
#[derive(Debug, Error)]
pub enum SliceVolError {
    #[error("grid overflow: {0}")]
    GridOverflow(String),
    #[error("target infeasible: {0}")]
    TargetInfeasible(String),
    #[error("empty segmentation")]
    EmptySegmentation,
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty cache")]
    EmptyCache,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("singular fit: {0}")]
    SingularFit(String),
    #[error("unfitted model: {0}")]
    UnfittedModel(String),
    #[error("undefined correlation")]
    UndefinedCorrelation,
    #[error("degenerate latent cloud")]
    DegenerateLatent,
    #[error("malformed interval: lower {lower} > upper {upper}")]
    MalformedInterval { lower: f64, upper: f64 },
    #[error("no hold-out defined")]
    NoHoldout,
    #[error("training failed: {0}")]
    Training(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SliceVolError>;
