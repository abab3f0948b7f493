use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid matrix shape {rows}x{cols} for {len} entries")]
    InvalidShape { rows: usize, cols: usize, len: usize },

    #[error("label column {column} is not one-hot")]
    NotOneHot { column: usize },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("invalid training config: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backtracking for layer {layer} did not certify the majorization (step coefficient {coeff:e})")]
    BacktrackFailed { layer: usize, coeff: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("worker failure in {phase} phase: {message}")]
    WorkerFailure { phase: &'static str, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("idx format: {0}")]
    Idx(String),

    #[error("csv row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
