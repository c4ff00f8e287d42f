//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree on a named axis.
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    DimMismatch {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    /// Layout text that does not follow the `label: (x1, y1, x2, y2)` grammar.
    #[error("layout parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("region is empty; a peak over an empty region is undefined")]
    EmptyRegion,

    #[error("non-finite {what} at step {step}, inner iteration {inner_iter}")]
    NonFinite {
        what: &'static str,
        step: usize,
        inner_iter: usize,
    },

    #[error("training diverged at step {step} (loss {loss}); last good checkpoint kept")]
    Diverged { step: usize, loss: f64 },

    #[error("unknown token {token:?} (vocabulary: {hint})")]
    UnknownToken { token: String, hint: String },

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("layout request failed after {attempts} attempts; raw replies: {replies:?}")]
    RepairsExhausted {
        attempts: usize,
        replies: Vec<String>,
    },

    #[error("chat transport error: {0}")]
    Transport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
