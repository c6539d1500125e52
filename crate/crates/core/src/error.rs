use thiserror::Error;

pub type Result<T> = std::result::Result<T, KarstError>;

#[derive(Debug, Error)]
pub enum KarstError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: expected length {expected}, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("kron apply: input length {got} does not factor as p1*p2 = {p1}*{p2} = {expected}")]
    KronLength {
        p1: usize,
        p2: usize,
        expected: usize,
        got: usize,
    },

    #[error("stacking dimension m={m} must divide both d_in={d_in} and d_out={d_out}")]
    Divisibility { d_in: usize, d_out: usize, m: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("unknown task recipe `{got}`; expected one of: {}", .known.join(", "))]
    UnknownRecipe {
        got: String,
        known: &'static [&'static str],
    },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("model file format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
