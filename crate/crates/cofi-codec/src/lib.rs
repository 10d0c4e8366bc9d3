//! Multi-scale codec over log-Mel spectrograms.
//!
//! The encoder is a cascade of ResNet + strided-conv blocks producing one
//! latent sequence per temporal scale. The decoder walks the scales from
//! coarse to fine: at each scale it quantizes the residual between the
//! encoding and what coarser scales already explain, adds the result back
//! together with a global embedding, and upsamples. Scale lists are always
//! ordered coarse→fine, so index 0 is the coarsest scale.

mod config;
mod layers;
mod model;
mod tokens;
mod train;

use thiserror::Error;

pub use config::{swnd_sample, CodecConfig, ScaleSpec, SwndConfig, MEL_HOP_MS};
pub use model::{Codec, DecodeOutput, GlobalEmbedding, QuantPath};
pub use tokens::{MultiScaleTokens, TokenGrid};
pub use train::{CodecLoss, CodecTrainer, TrainConfig};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),
    #[error(transparent)]
    Quant(#[from] quantizers::QuantError),
    #[error(transparent)]
    Dsp(#[from] dsp_frontend::DspError),
}

pub type Result<T> = std::result::Result<T, CodecError>;
