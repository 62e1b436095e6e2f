use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero-norm vector cannot be normalized")]
    ZeroNorm,

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("row {row} is not unit-norm (norm = {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("negative lexicon activation {value} at index {index}")]
    NegativeActivation { index: usize, value: f64 },

    #[error("target id {target} out of range for lexicon of size {size}")]
    TargetOutOfRange { target: usize, size: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("query {0} has no ground-truth candidate")]
    MissingGroundTruth(usize),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(context: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
