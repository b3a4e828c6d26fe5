use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("grid too large for dense representation: {pixels} pixels (limit {limit})")]
    GridTooLarge { pixels: usize, limit: usize },

    #[error("degenerate operator: estimated norm is zero")]
    DegenerateOperator,

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: (usize, usize), got: (usize, usize)) -> Self {
        Error::ShapeMismatch { expected, got }
    }
}
