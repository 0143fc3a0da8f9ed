use thiserror::Error;

/// Errors from grid, transform, dataset and metric operations.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid inventory: {0}")]
    InvalidInventory(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("state is already normalized")]
    AlreadyNormalized,

    #[error("state is not normalized")]
    NotNormalized,

    #[error("channel names disagree: {0}")]
    ChannelMismatch(String),

    #[error("negative rain rate: {0}")]
    NegativeRainRate(f64),

    #[error("negative threshold: {0}")]
    NegativeThreshold(f64),

    #[error("dimensions {h}x{w} not divisible by pooling factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },

    #[error("zero-variance channels: {0:?}")]
    ZeroVariance(Vec<String>),

    #[error("zero-variance anomaly field")]
    DegenerateAnomaly,

    #[error("missing (month, hour) climatology keys: {0:?}")]
    MissingClimatologyKeys(Vec<(u32, u32)>),

    #[error("timestamp {0} not present in dataset")]
    MissingTimestamp(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    #[error("unsupported layout version {got} (supported: {supported})")]
    UnsupportedVersion { got: u32, supported: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
