use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("matrix is not symmetric (max asymmetry {max_asym:e})")]
    NotSymmetric { max_asym: f64 },

    #[error("matrix is not positive definite even with jitter {max_jitter:e}")]
    NotPositiveDefinite { max_jitter: f64 },

    #[error("rank deficient: {rows} rows for feature dimension {dim} with zero ridge")]
    RankDeficient { rows: usize, dim: usize },

    #[error("hidden features need {needed} entries but the budget is {budget}; use a sketch instead")]
    MemoryBudgetExceeded { needed: usize, budget: usize },

    #[error("subsample size {k} exceeds population {n}")]
    SubsampleTooLarge { k: usize, n: usize },

    #[error("subsample size {k} is below feature dimension {r}")]
    SubsampleBelowDim { k: usize, r: usize },

    #[error("{what} of size {size} exceeds cap {cap}")]
    SizeCapExceeded { what: &'static str, size: usize, cap: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("column '{name}' not found; available columns: {available:?}")]
    MissingColumn { name: String, available: Vec<String> },

    #[error("non-numeric or non-finite cells in data rows {rows:?}")]
    BadRows { rows: Vec<usize> },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
