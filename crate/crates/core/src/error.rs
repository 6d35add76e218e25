use thiserror::Error;

/// Errors raised by the model, data and evaluation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: dipole within {distance:.3e} m of electrode {electrode}")]
    DegenerateGeometry { electrode: usize, distance: f64 },

    #[error("invalid electrode layout: {0}")]
    InvalidLayout(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("record has no observed entries")]
    NoObservedData,

    #[error("record has no held-out entries")]
    NoHeldOutData,

    #[error("empty input")]
    EmptyInput,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("record too short: {required} samples required, {available} available")]
    InsufficientLength { required: usize, available: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-uniform sampling at row {row}")]
    NonUniformSampling { row: usize },

    #[error("unknown lead header: {0}")]
    UnknownLeadHeader(String),

    #[error("record sets differ between reports: {0}")]
    RecordSetMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
