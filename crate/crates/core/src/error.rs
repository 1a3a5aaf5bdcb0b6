//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum SurvError {
    /// I/O failure while reading or writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// CSV-level read/write failure not tied to one cell.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Malformed configuration (bad field values, unknown keys, missing paths).
    #[error("config error: {0}")]
    Config(String),

    /// CSV column missing from the header.
    #[error("missing column `{0}`")]
    MissingColumn(String),

    /// A cell failed to parse as a number.
    #[error("non-numeric cell at row {row}, column `{column}`: {value:?}")]
    NonNumericCell { row: usize, column: String, value: String },

    /// Treatment label outside `[1..m]`.
    #[error("arm label {label} outside [1..{m}] at row {row}")]
    ArmLabel { row: usize, label: i64, m: usize },

    /// Observed time is negative.
    #[error("negative observed time {value} at row {row}")]
    NegativeTime { row: usize, value: f64 },

    /// Dataset has no rows.
    #[error("dataset is empty")]
    EmptyDataset,

    /// Generic validation failure on domain-type invariants.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two aligned structures disagree on dimensions.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Metric matrix is not symmetric positive definite.
    #[error("kernel metric is not positive definite")]
    NonPdMetric,

    /// No observations carry the requested arm.
    #[error("arm {0} has no observations")]
    EmptyArm(usize),

    /// All candidate weights are zero, so normalization is impossible.
    #[error("degenerate weights: all raw weights are zero")]
    DegenerateWeights,

    /// Numerical linear algebra gave up (Cholesky after jitter escalation, singular solve).
    #[error("linear algebra failure: {0}")]
    Linalg(String),

    /// An iterative solver failed to converge and no usable iterate exists.
    #[error("convergence failure: {0}")]
    Convergence(String),
}

impl SurvError {
    /// Process exit code for the CLI: 2 config, 3 data, 4 convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            SurvError::Config(_) => 2,
            SurvError::Convergence(_) => 4,
            SurvError::Io(_) => 3,
            SurvError::Csv(_)
            | SurvError::MissingColumn(_)
            | SurvError::NonNumericCell { .. }
            | SurvError::ArmLabel { .. }
            | SurvError::NegativeTime { .. }
            | SurvError::EmptyDataset
            | SurvError::InvalidInput(_)
            | SurvError::DimensionMismatch(_)
            | SurvError::NonPdMetric
            | SurvError::EmptyArm(_)
            | SurvError::DegenerateWeights
            | SurvError::Linalg(_) => 3,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, SurvError>;
