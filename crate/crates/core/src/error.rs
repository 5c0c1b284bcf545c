use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid scene spec: {0}")]
    InvalidSceneSpec(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("step {step} has no images with annotations of its categories")]
    EmptyStep { step: usize },
    #[error("step index {index} out of range for a split with {len} steps")]
    StepOutOfRange { index: usize, len: usize },
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

pub type Result<T> = core::result::Result<T, Error>;
