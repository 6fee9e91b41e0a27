//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by tree fitting, calibration, data handling, and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid alpha {0}: must lie strictly in (0, 1)")]
    InvalidAlpha(f64),

    #[error("empty node")]
    EmptyNode,

    #[error("insufficient calibration data: need at least {needed}, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("ineligible direction {dim}: a dyadic child is empty")]
    IneligibleDirection { dim: usize },

    #[error("point out of domain: coordinate {index} = {value} is outside [0, 1]")]
    OutOfDomain { index: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("node ({depth}, {pos}) is not part of the tree")]
    UnknownNode { depth: u32, pos: u64 },

    #[error("leaf too small: {count} scores (need at least 3)")]
    LeafTooSmall { count: usize },

    #[error("delta bound undefined for n = {n}, m = {m}: need 3 <= m <= n")]
    DeltaDomain { n: usize, m: usize },

    #[error("malformed probability vector{}: sum = {sum}", row_suffix(*.row))]
    MalformedSimplex { row: Option<usize>, sum: f64 },

    #[error("label index {label} out of range for {len} classes")]
    LabelOutOfRange { label: usize, len: usize },

    #[error("empty rule list")]
    EmptyRuleList,

    #[error("subsample too small: {size} points for minimum leaf size {min_leaf}")]
    SubsampleTooSmall { size: usize, min_leaf: usize },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("csv parse error at data row {row}, column '{column}': {message}")]
    CsvParse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Runtime(String),
}

fn row_suffix(row: Option<usize>) -> String {
    match row {
        Some(r) => format!(" at data row {r}"),
        None => String::new(),
    }
}

impl Error {
    /// Process exit code: 1 for validation problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidAlpha(_)
            | Error::InsufficientData { .. }
            | Error::DimensionMismatch { .. }
            | Error::DeltaDomain { .. }
            | Error::Schema(_)
            | Error::SubsampleTooSmall { .. }
            | Error::LeafTooSmall { .. }
            | Error::EmptyRuleList => 1,
            _ => 2,
        }
    }
}
