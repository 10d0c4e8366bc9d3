use thiserror::Error;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("capacity error: sequence of {len} exceeds context {max}")]
    Capacity { len: usize, max: usize },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("generation failed at scale {scale}, position {position}: {detail}")]
    Generation {
        scale: usize,
        position: usize,
        detail: String,
    },
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),
    #[error(transparent)]
    Codec(#[from] cofi_codec::CodecError),
}

pub type Result<T> = std::result::Result<T, LmError>;
