use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error in {path}: {message}")]
    Ingest { path: PathBuf, message: String },

    #[error("parse error in {path} at row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("dimension mismatch: {first} has {first_dim} regions but {second} has {second_dim}")]
    DimensionMismatch {
        first: String,
        first_dim: usize,
        second: String,
        second_dim: usize,
    },

    #[error("insufficient data for subject {subject}: {rows} time points (need at least 2)")]
    InsufficientData { subject: String, rows: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error for subject {subject}: {message}")]
    Numeric { subject: String, message: String },

    #[error("optimizer diverged at iteration {iteration} (step size {step_size:e})")]
    Divergence { iteration: usize, step_size: f64 },

    #[error("model selection failed: every candidate k failed ({0})")]
    AllCandidatesFailed(String),

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration and validation
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_)
            | Error::Numeric { .. }
            | Error::Divergence { .. }
            | Error::AllCandidatesFailed(_) => 3,
            _ => 2,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingest { .. } => "ingest",
            Error::Parse { .. } => "parse",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Size(_) => "size",
            Error::Domain(_) => "domain",
            Error::Numeric { .. } => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::AllCandidatesFailed(_) => "all_candidates_failed",
            Error::SchemaVersion { .. } => "schema_version",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
