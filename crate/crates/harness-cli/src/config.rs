//! Run configuration read from `key=value` lines (`#` starts a comment).
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | 1 |
//! | `codec.latent_dim` | 32 |
//! | `codec.codebook_size` | 16 |
//! | `codec.res_units` | 2 |
//! | `codec.extra_fine_units` | 0 |
//! | `codec.steps` | 2500 |
//! | `codec.lr_start` / `codec.lr_end` | 5e-3 / 1.667e-3 |
//! | `codec.swnd` | `0.8,0.1,0.1` (`off` disables) |
//! | `codec.dead_code_every` | 50 |
//! | `codec.batch_frames` | 0 (whole corpus per step) |
//! | `lm.vocab_size` | 300 |
//! | `lm.dim` / `lm.layers` / `lm.heads` | 64 / 2 / 4 |
//! | `lm.max_len` | 512 |
//! | `lm.steps` | 400 |
//! | `lm.lr_start` / `lm.lr_end` | 3e-3 / 3e-4 |
//! | `sample.top_p` / `sample.top_k` | 0.8 / 50 |
//! | `sample.repetition_penalty` / `sample.temperature` | 2.0 / 1.0 |
//! | `synth.griffin_lim_iters` | 32 |

use std::collections::BTreeMap;
use std::path::Path;

use cofi_lm::SamplerConfig;

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub codec_latent_dim: usize,
    pub codec_codebook_size: usize,
    pub codec_res_units: usize,
    pub codec_extra_fine_units: usize,
    pub codec_steps: usize,
    pub codec_lr_start: f64,
    pub codec_lr_end: f64,
    pub codec_swnd: Option<Vec<f64>>,
    pub codec_dead_code_every: usize,
    pub codec_batch_frames: usize,
    pub lm_vocab_size: usize,
    pub lm_dim: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_max_len: usize,
    pub lm_steps: usize,
    pub lm_lr_start: f64,
    pub lm_lr_end: f64,
    pub sampler: SamplerConfig,
    pub griffin_lim_iters: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            codec_latent_dim: 32,
            codec_codebook_size: 16,
            codec_res_units: 2,
            codec_extra_fine_units: 0,
            codec_steps: 2500,
            codec_lr_start: 5e-3,
            codec_lr_end: 5e-3 / 3.0,
            codec_swnd: Some(vec![0.8, 0.1, 0.1]),
            codec_dead_code_every: 50,
            codec_batch_frames: 0,
            lm_vocab_size: 300,
            lm_dim: 64,
            lm_layers: 2,
            lm_heads: 4,
            lm_max_len: 512,
            lm_steps: 400,
            lm_lr_start: 3e-3,
            lm_lr_end: 3e-4,
            sampler: SamplerConfig::default(),
            griffin_lim_iters: 32,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), n).is_some() {
                return Err(HarnessError::Config(format!("key {k} given twice")));
            }
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "seed" => self.seed = num(k, v)?,
            "codec.latent_dim" => self.codec_latent_dim = num(k, v)?,
            "codec.codebook_size" => self.codec_codebook_size = num(k, v)?,
            "codec.res_units" => self.codec_res_units = num(k, v)?,
            "codec.extra_fine_units" => self.codec_extra_fine_units = num(k, v)?,
            "codec.steps" => self.codec_steps = num(k, v)?,
            "codec.lr_start" => self.codec_lr_start = num(k, v)?,
            "codec.lr_end" => self.codec_lr_end = num(k, v)?,
            "codec.swnd" => {
                self.codec_swnd = if v == "off" {
                    None
                } else {
                    Some(v.split(',').map(|x| num(k, x.trim())).collect::<Result<_>>()?)
                }
            }
            "codec.dead_code_every" => self.codec_dead_code_every = num(k, v)?,
            "codec.batch_frames" => self.codec_batch_frames = num(k, v)?,
            "lm.vocab_size" => self.lm_vocab_size = num(k, v)?,
            "lm.dim" => self.lm_dim = num(k, v)?,
            "lm.layers" => self.lm_layers = num(k, v)?,
            "lm.heads" => self.lm_heads = num(k, v)?,
            "lm.max_len" => self.lm_max_len = num(k, v)?,
            "lm.steps" => self.lm_steps = num(k, v)?,
            "lm.lr_start" => self.lm_lr_start = num(k, v)?,
            "lm.lr_end" => self.lm_lr_end = num(k, v)?,
            "sample.top_p" => self.sampler.top_p = num(k, v)?,
            "sample.top_k" => self.sampler.top_k = num(k, v)?,
            "sample.repetition_penalty" => self.sampler.repetition_penalty = num(k, v)?,
            "sample.temperature" => self.sampler.temperature = num(k, v)?,
            "synth.griffin_lim_iters" => self.griffin_lim_iters = num(k, v)?,
            _ => return Err(HarnessError::Config(format!("unknown key {k}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.codec_steps == 0 || self.lm_steps == 0 {
            return bad("step counts must be at least 1");
        }
        if !(self.codec_lr_start >= self.codec_lr_end && self.codec_lr_end > 0.0) {
            return bad("codec learning rates need lr_start >= lr_end > 0");
        }
        if !(self.lm_lr_start >= self.lm_lr_end && self.lm_lr_end > 0.0) {
            return bad("lm learning rates need lr_start >= lr_end > 0");
        }
        if self.lm_vocab_size < 256 {
            return bad("lm.vocab_size must cover the 256 byte symbols");
        }
        self.sampler
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Seed for one component, offset from the run seed.
    pub fn sub_seed(&self, offset: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(offset)
    }
}
