use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum McvaeError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("batch contains no death events")]
    NoEventBatch,

    #[error("no comparable pairs for concordance")]
    NoComparablePairs,

    #[error("all paired differences are zero; signed-rank test is untestable")]
    AllZeroDifferences,

    #[error("non-finite {what} in {context}")]
    NonFinite { what: String, context: String },

    #[error("malformed row {row}: {detail}")]
    MalformedRow { row: usize, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, McvaeError>;

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}
