use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty plan: at least one intersection is required")]
    EmptyPlan,

    #[error("infeasible repair: {0}")]
    InfeasibleRepair(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("unknown phase index {phase} at intersection {intersection}")]
    UnknownPhase { intersection: usize, phase: usize },

    #[error("unknown intersection {0}")]
    UnknownIntersection(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty trace")]
    EmptyTrace,

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
