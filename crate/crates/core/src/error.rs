use thiserror::Error;

/// Errors raised across the simulator and agent library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("quantization level {0} is below 2")]
    LevelTooSmall(u32),
    #[error("non-finite element at index {0}")]
    NonFinite(usize),
    #[error("nonpositive CPU frequency {0} Hz")]
    NonPositiveFrequency(f64),
    #[error("nonpositive bandwidth {0} Hz")]
    NonPositiveBandwidth(f64),
    #[error("nonpositive noise density {0} W/Hz")]
    NonPositiveNoise(f64),
    #[error("zero transmission rate")]
    ZeroRate,
    #[error("empty client selection")]
    EmptySelection,
    #[error("empty shard for client {0}")]
    EmptyShard(usize),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("aggregation weights sum to zero")]
    ZeroWeight,
    #[error("no updates to aggregate")]
    NothingToAggregate,
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("degenerate adversarial factor: denominator is zero")]
    DegenerateAdversarial,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("dimension {0} is degenerate (max == min)")]
    DegenerateDimension(usize),
    #[error("point {0} lies beyond the reference point")]
    BeyondReference(usize),
    #[error("exact hypervolume supports at most 3 dimensions, got {0}")]
    DimensionTooHigh(usize),
    #[error("support mismatch: target has zero probability where the approximation does not")]
    SupportMismatch,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("mismatched record: {0}")]
    Mismatch(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;
