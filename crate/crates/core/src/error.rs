use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("support has {size} points, above the cap of {cap}")]
    SupportTooLarge { size: f64, cap: usize },
    #[error("design kind `{0}` cannot be enumerated")]
    NotEnumerable(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("bound is not identified: {0}")]
    NotIdentified(String),
    #[error("structural zero in inclusion probabilities at index {0} is not flagged")]
    UnflaggedZero(usize),
    #[error("observed cell (arm {arm}, unit {unit}) has zero inclusion probability")]
    ZeroProbabilityObserved { arm: usize, unit: usize },
    #[error("no observed units in arm {0}")]
    EmptyArm(usize),
    #[error("weak identification: {0}")]
    WeakIdentification(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("exposure rules: {0}")]
    Rules(String),
    #[error("covariates: {0}")]
    Covariates(String),
    #[error("negative variance input {0}")]
    NegativeVariance(f64),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
