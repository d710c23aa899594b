use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("non-finite value at layer {layer}")]
    NonFinite { layer: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("no contrastable signal: every (source, eval, label) slice is degenerate")]
    NoContrastableSignal,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(context: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::Shape {
        context,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
