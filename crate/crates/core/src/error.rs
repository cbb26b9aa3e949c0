use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("divergence is infinite: q[{index}] = 0 where p[{index}] > 0")]
    InfiniteDivergence { index: usize },

    #[error("no sign change of the stationarity residual on (0, 1)")]
    NoBracket,

    #[error("shuffle buffer not ready: {len} entries, {required} required")]
    NotReady { len: usize, required: usize },

    #[error("empty class: {0}")]
    EmptyClass(&'static str),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("worker failed: {0}")]
    Worker(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
