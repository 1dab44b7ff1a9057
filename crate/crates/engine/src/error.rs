use thiserror::Error;

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("tensor shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),

    #[error("layer {index} ({kind}): {reason}")]
    LayerShape {
        index: usize,
        kind: &'static str,
        reason: String,
    },

    #[error("input shape mismatch: network expects {expected:?} per sample, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("backward called without a cached training-mode forward pass (layer {0})")]
    NoForwardCache(usize),

    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),

    #[error("non-finite gradient in layer {layer}, parameter {param}")]
    NonFiniteGradient { layer: usize, param: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("expected {expected} labels, got {actual}")]
    LabelCount { expected: usize, actual: usize },

    #[error("optimizer state does not match network parameters: {0}")]
    StateMismatch(String),
}
