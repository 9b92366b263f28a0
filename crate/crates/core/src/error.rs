use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("policies `{0}` and `{1}` are incomparable under the deviation ordering")]
    IncomparablePolicies(String, String),
    #[error("policy `{0}` appears twice; levels must strictly increase")]
    DuplicatePolicy(String),
    #[error("invalid pathway spec: {0}")]
    InvalidSpec(String),
    #[error("invalid network plan: {0}")]
    InvalidPlan(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("level {level} out of range 1..={max}")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("non-finite {component} ({value})")]
    NonFinite { component: String, value: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
