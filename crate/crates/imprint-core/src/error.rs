//! Crate wide error type. Variants are grouped by what the caller can do
//! about them: bad inputs, bad files, or a run that went off the rails.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape of an input does not match what the operation requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A numeric argument is outside its documented domain.
    #[error("invalid argument {name}: {reason}")]
    Argument { name: &'static str, reason: String },

    /// Input data contains NaN or infinity where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A serialized artifact is malformed or has the wrong magic/version.
    #[error("bad artifact {path}: {reason}")]
    Format { path: String, reason: String },

    /// Two artifacts that must belong together do not agree.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    /// The training loop aborted because the objective blew up.
    #[error("training diverged at step {step}: total loss {value}")]
    Diverged { step: u64, value: f64 },

    /// A frozen component changed during training. Always a bug.
    #[error("frozen parameters changed: {0}")]
    FrozenDrift(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("csv error: {0}")]
    Csv(String),
}

impl Error {
    pub fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn argument(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Argument {
            name,
            reason: reason.into(),
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}
