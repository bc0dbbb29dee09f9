use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: input has {got} channels, weight expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("spatial dims {dims:?} are not divisible by stride {stride}")]
    NonDivisibleStride { dims: Vec<usize>, stride: usize },
    #[error("positional encoding needs an even channel count, got {0}")]
    OddChannels(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
