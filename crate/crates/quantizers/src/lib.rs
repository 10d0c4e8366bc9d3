//! Vector quantizers used inside the codec decoder blocks.
//!
//! * [`vq_quantize`]: nearest codeword, single stream.
//! * [`rq_quantize`]: residual stages, output is the sum of stage codewords.
//! * [`pq_quantize`]: contiguous sub-vectors quantized independently.
//! * [`opq_quantize`]: product quantization whose trailing streams are
//!   randomly dropped during training so earlier streams carry the coarse
//!   content.
//!
//! Codebooks learn by exponential moving average rather than gradients, with
//! dead-code re-initialization from input frames.

mod codebook;
mod quantizer;

use thiserror::Error;

pub use codebook::{dead_code_reinit, ema_update, Codebook, EMA_COUNT_FLOOR};
pub use quantizer::{
    opq_quantize, pq_quantize, rq_quantize, sample_stream_drop, vq_quantize, QuantMode, QuantResult, Quantizer,
    QuantizerConfig,
};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),
}

pub type Result<T> = std::result::Result<T, QuantError>;
