use quantizers::QuantMode;
use rand::Rng;

use crate::{CodecError, Result};

/// Mel frame hop in milliseconds.
pub const MEL_HOP_MS: usize = 10;

/// Temporal scales, coarse→fine.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSpec {
    pub frameshift_ms: Vec<usize>,
    pub num_streams: Vec<usize>,
    pub codebook_size: Vec<usize>,
    pub latent_dim: usize,
}

impl ScaleSpec {
    /// 120/40/20 ms with 1/1/4 streams.
    pub fn canonical(codebook_size: usize, latent_dim: usize) -> Self {
        Self {
            frameshift_ms: vec![120, 40, 20],
            num_streams: vec![1, 1, 4],
            codebook_size: vec![codebook_size; 3],
            latent_dim,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.frameshift_ms.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_scales();
        if n == 0 {
            return Err(CodecError::Config("at least one scale required".into()));
        }
        if self.num_streams.len() != n || self.codebook_size.len() != n {
            return Err(CodecError::Config("per-scale lists differ in length".into()));
        }
        if self.latent_dim == 0 {
            return Err(CodecError::Config("latent_dim must be positive".into()));
        }
        for (i, &s) in self.frameshift_ms.iter().enumerate() {
            if s == 0 || s % MEL_HOP_MS != 0 {
                return Err(CodecError::Config(format!(
                    "frameshift {s} ms is not a multiple of the Mel hop"
                )));
            }
            if i + 1 < n {
                let finer = self.frameshift_ms[i + 1];
                if finer >= s || s % finer != 0 {
                    return Err(CodecError::Config(format!(
                        "frameshift {s} ms must be a larger multiple of {finer} ms"
                    )));
                }
            }
        }
        if self.num_streams.contains(&0) || self.codebook_size.contains(&0) {
            return Err(CodecError::Config("streams and codebook sizes must be positive".into()));
        }
        Ok(())
    }

    /// Mel frames per token at each scale.
    pub fn hop_frames(&self) -> Vec<usize> {
        self.frameshift_ms.iter().map(|s| s / MEL_HOP_MS).collect()
    }

    /// Total downsampling factor (Mel frames per coarsest token).
    pub fn total_factor(&self) -> usize {
        self.frameshift_ms[0] / MEL_HOP_MS
    }

    /// Upsampling stride from scale `i` to the next finer one (or to the
    /// Mel rate for the finest scale).
    pub fn up_stride(&self, i: usize) -> usize {
        let finer = self.frameshift_ms.get(i + 1).copied().unwrap_or(MEL_HOP_MS);
        self.frameshift_ms[i] / finer
    }

    /// Mel frame count after right-padding to a multiple of the total factor.
    pub fn padded_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.total_factor()) * self.total_factor()
    }

    /// Token count per scale for a given Mel frame count.
    pub fn scale_lengths(&self, frames: usize) -> Vec<usize> {
        let padded = self.padded_frames(frames);
        self.hop_frames().iter().map(|h| padded / h).collect()
    }
}

/// Scale-wise nested dropout distribution over `b ∈ [0, N_s−1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwndConfig {
    pub probs: Vec<f64>,
}

impl SwndConfig {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(CodecError::Config(format!("invalid SWND probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CodecError::Config(format!("SWND probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// `p = (0.8, 0.1, 0.1)`.
    pub fn canonical() -> Self {
        Self {
            probs: vec![0.8, 0.1, 0.1],
        }
    }
}

/// Number of finest scales to mask; `0` masks nothing.
pub fn swnd_sample<R: Rng + ?Sized>(cfg: &SwndConfig, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (b, p) in cfg.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return b;
        }
    }
    cfg.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub scales: ScaleSpec,
    pub quant_modes: Vec<QuantMode>,
    /// Residual units per ResNet block.
    pub res_units: usize,
    /// Additional residual units in the finest encoder and decoder blocks.
    pub extra_fine_units: usize,
    pub kernel: usize,
    pub ref_kernel: usize,
    pub ema_decay: f64,
    pub lambda_vq: f64,
    pub lambda_reg: f64,
    pub lambda_adv: f64,
}

impl CodecConfig {
    /// Full-size layout: 512-dim latents, 16384-codeword OPQ codebooks.
    pub fn canonical() -> Self {
        Self::with_scales(ScaleSpec::canonical(16384, 512), 4, 4)
    }

    /// Desk-scale default: 128-dim latents, 1024 codewords.
    pub fn desk() -> Self {
        Self::with_scales(ScaleSpec::canonical(1024, 128), 4, 0)
    }

    pub fn with_scales(scales: ScaleSpec, res_units: usize, extra_fine_units: usize) -> Self {
        let quant_modes = vec![QuantMode::Opq; scales.num_scales()];
        Self {
            scales,
            quant_modes,
            res_units,
            extra_fine_units,
            kernel: 3,
            ref_kernel: 3,
            ema_decay: 0.99,
            lambda_vq: 1.0,
            lambda_reg: 1.0,
            lambda_adv: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scales.validate()?;
        if self.quant_modes.len() != self.scales.num_scales() {
            return Err(CodecError::Config("one quantizer mode per scale required".into()));
        }
        if self.kernel.is_multiple_of(2) || self.ref_kernel.is_multiple_of(2) {
            return Err(CodecError::Config("kernel sizes must be odd".into()));
        }
        for i in 0..self.scales.num_scales() {
            self.quantizer_config(i).validate()?;
        }
        Ok(())
    }

    pub fn quantizer_config(&self, i: usize) -> quantizers::QuantizerConfig {
        let streams = self.scales.num_streams[i];
        let mode = match self.quant_modes[i] {
            QuantMode::Vq if streams > 1 => QuantMode::Pq,
            m => m,
        };
        quantizers::QuantizerConfig {
            mode,
            num_streams: streams,
            codebook_size: self.scales.codebook_size[i],
            dim: self.scales.latent_dim,
        }
    }
}
