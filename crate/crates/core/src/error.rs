//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by dataset loading, validation, calibration, and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum AuditError {
    /// Dataset or probability file violates its declared schema
    /// (unknown column, out-of-range code, non-positive weight, ...).
    #[error("schema violation: {0}")]
    Schema(String),

    /// Inputs are well-formed but mutually inconsistent (unknown
    /// respondent id, duplicate id, mismatched label count, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Configuration value out of range or unparseable.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A cross-partition integrity check failed; results computed after
    /// such a violation would be silently wrong, so the run aborts.
    #[error("integrity violation: {0}")]
    Integrity(String),

    /// Requested split is impossible (e.g. a partition fraction so small
    /// that a required partition receives no records).
    #[error("infeasible split: {0}")]
    Infeasible(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AuditError>;
