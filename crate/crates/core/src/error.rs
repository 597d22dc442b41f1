use alloc::string::String;

/// Errors raised by the segmentation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("scene smaller than 4×patch: got {height}×{width}, need at least {min}×{min}")]
    SceneTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("window origin ({row}, {col}) out of bounds for a {height}×{width} scene with patch {patch}")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
