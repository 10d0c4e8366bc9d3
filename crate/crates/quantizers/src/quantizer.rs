use rand::Rng;
use tensor_core::Tensor;

use crate::codebook::{check_frames, dead_code_reinit, ema_update, Codebook};
use crate::{QuantError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    Vq,
    Rq,
    Pq,
    Opq,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Vq => "vq",
            QuantMode::Rq => "rq",
            QuantMode::Pq => "pq",
            QuantMode::Opq => "opq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vq" => Ok(QuantMode::Vq),
            "rq" => Ok(QuantMode::Rq),
            "pq" => Ok(QuantMode::Pq),
            "opq" => Ok(QuantMode::Opq),
            other => Err(QuantError::Config(format!("unknown quantizer mode {other:?}"))),
        }
    }

    /// Whether streams split the vector (PQ family) rather than stack (RQ).
    pub fn is_product(self) -> bool {
        matches!(self, QuantMode::Pq | QuantMode::Opq)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerConfig {
    pub mode: QuantMode,
    pub num_streams: usize,
    pub codebook_size: usize,
    pub dim: usize,
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_streams == 0 || self.codebook_size == 0 || self.dim == 0 {
            return Err(QuantError::Config(format!("degenerate quantizer {self:?}")));
        }
        if self.mode == QuantMode::Vq && self.num_streams != 1 {
            return Err(QuantError::Config("VQ has exactly one stream".into()));
        }
        if self.mode.is_product() && !self.dim.is_multiple_of(self.num_streams) {
            return Err(QuantError::Config(format!(
                "dim {} not divisible by {} streams",
                self.dim, self.num_streams
            )));
        }
        Ok(())
    }

    /// Dimension of each stream's codebook.
    pub fn stream_dim(&self) -> usize {
        if self.mode.is_product() {
            self.dim / self.num_streams
        } else {
            self.dim
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantResult {
    /// Row-major `T × num_streams`.
    pub indices: Vec<usize>,
    pub num_streams: usize,
    /// `T × D` output after any stream masking.
    pub quantized: Tensor,
    /// Mean over frames of the squared error to the unmasked quantization.
    pub vq_loss: f64,
    /// Number of leading streams kept (equals `num_streams` without masking).
    pub kept_streams: usize,
}

impl QuantResult {
    pub fn frames(&self) -> usize {
        self.indices.len() / self.num_streams.max(1)
    }

    pub fn frame_indices(&self, t: usize) -> &[usize] {
        &self.indices[t * self.num_streams..(t + 1) * self.num_streams]
    }

    /// Indices of one stream across all frames.
    pub fn stream(&self, s: usize) -> Vec<usize> {
        self.indices.iter().skip(s).step_by(self.num_streams).copied().collect()
    }
}

fn check_dim(x: &Tensor, cb: &Codebook) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != cb.dim() {
        return Err(QuantError::Input(format!(
            "frames of shape {:?} against codebook dimension {}",
            x.shape(),
            cb.dim()
        )));
    }
    Ok(())
}

fn mean_sq_err(x: &Tensor, q: &[f64]) -> f64 {
    let t = x.rows().max(1) as f64;
    x.data().iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t
}

/// Nearest-codeword quantization of each row of `x`.
pub fn vq_quantize(x: &Tensor, cb: &Codebook) -> Result<QuantResult> {
    check_dim(x, cb)?;
    let mut indices = Vec::with_capacity(x.rows());
    let mut q = Vec::with_capacity(x.len());
    for t in 0..x.rows() {
        let (k, _) = cb.nearest(x.row(t));
        indices.push(k);
        q.extend_from_slice(cb.codeword(k));
    }
    let vq_loss = mean_sq_err(x, &q);
    Ok(QuantResult {
        indices,
        num_streams: 1,
        quantized: Tensor::new(x.shape().to_vec(), q)?,
        vq_loss,
        kept_streams: 1,
    })
}

fn product_split(x: &Tensor, cbs: &[Codebook]) -> Result<usize> {
    if cbs.is_empty() {
        return Err(QuantError::Config("no codebooks".into()));
    }
    if x.shape().len() != 2 {
        return Err(QuantError::Input(format!("expected T×D frames, got {:?}", x.shape())));
    }
    let d = x.shape()[1];
    let s = cbs.len();
    if !d.is_multiple_of(s) {
        return Err(QuantError::Config(format!("dim {d} not divisible by {s} streams")));
    }
    let sub = d / s;
    if let Some(cb) = cbs.iter().find(|cb| cb.dim() != sub) {
        return Err(QuantError::Config(format!(
            "codebook dimension {} but sub-vectors have {sub}",
            cb.dim()
        )));
    }
    Ok(sub)
}

fn product_quantize(x: &Tensor, cbs: &[Codebook], keep: usize) -> Result<QuantResult> {
    let sub = product_split(x, cbs)?;
    let s = cbs.len();
    let (t_len, d) = (x.rows(), x.cols());
    let mut indices = Vec::with_capacity(t_len * s);
    let mut full = vec![0.0; t_len * d];
    for t in 0..t_len {
        let row = x.row(t);
        for (j, cb) in cbs.iter().enumerate() {
            let (k, _) = cb.nearest(&row[j * sub..(j + 1) * sub]);
            indices.push(k);
            full[t * d + j * sub..t * d + (j + 1) * sub].copy_from_slice(cb.codeword(k));
        }
    }
    let vq_loss = mean_sq_err(x, &full);
    if keep < s {
        for t in 0..t_len {
            full[t * d + keep * sub..(t + 1) * d].fill(0.0);
        }
    }
    Ok(QuantResult {
        indices,
        num_streams: s,
        quantized: Tensor::new(x.shape().to_vec(), full)?,
        vq_loss,
        kept_streams: keep,
    })
}

/// Product quantization over contiguous sub-vectors.
pub fn pq_quantize(x: &Tensor, cbs: &[Codebook]) -> Result<QuantResult> {
    product_quantize(x, cbs, cbs.len())
}

/// Residual quantization; stage `s` quantizes what stages before it missed.
pub fn rq_quantize(x: &Tensor, cbs: &[Codebook]) -> Result<QuantResult> {
    let stages = rq_stage_inputs(x, cbs)?;
    let s = cbs.len();
    let (t_len, d) = (x.rows(), x.cols());
    let mut indices = vec![0; t_len * s];
    let mut q = vec![0.0; t_len * d];
    for (j, (cb, input)) in cbs.iter().zip(&stages).enumerate() {
        for t in 0..t_len {
            let (k, _) = cb.nearest(input.row(t));
            indices[t * s + j] = k;
            for (acc, c) in q[t * d..(t + 1) * d].iter_mut().zip(cb.codeword(k)) {
                *acc += c;
            }
        }
    }
    let vq_loss = mean_sq_err(x, &q);
    Ok(QuantResult {
        indices,
        num_streams: s,
        quantized: Tensor::new(x.shape().to_vec(), q)?,
        vq_loss,
        kept_streams: s,
    })
}

/// Residual seen by each RQ stage.
fn rq_stage_inputs(x: &Tensor, cbs: &[Codebook]) -> Result<Vec<Tensor>> {
    if cbs.is_empty() {
        return Err(QuantError::Config("no codebooks".into()));
    }
    for cb in cbs {
        check_dim(x, cb)?;
    }
    let mut inputs = Vec::with_capacity(cbs.len());
    let mut residual = x.clone();
    for cb in cbs {
        let next: Vec<f64> = (0..residual.rows())
            .flat_map(|t| {
                let r = residual.row(t);
                let (k, _) = cb.nearest(r);
                r.iter().zip(cb.codeword(k)).map(|(a, c)| a - c).collect::<Vec<_>>()
            })
            .collect();
        let next = Tensor::new(x.shape().to_vec(), next)?;
        inputs.push(std::mem::replace(&mut residual, next));
    }
    Ok(inputs)
}

/// Samples how many leading streams survive: `j` with probability `probs[j]`,
/// `j ∈ 0..=S`. `j = S` keeps everything; `j = 0` masks every stream.
pub fn sample_stream_drop<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding slack: fall back to the last outcome with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn check_drop_probs(probs: &[f64], streams: usize) -> Result<()> {
    if probs.len() != streams + 1 {
        return Err(QuantError::Config(format!(
            "{} drop probabilities for {streams} streams",
            probs.len()
        )));
    }
    if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(QuantError::Config("drop probabilities outside [0, 1]".into()));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(QuantError::Config(format!("drop probabilities sum to {total}")));
    }
    Ok(())
}

/// Ordered product quantization. With an `rng` (training), the number of
/// kept leading streams is drawn from `order_drop_probs` and the rest are
/// zeroed; without one (inference) nothing is masked.
pub fn opq_quantize<R: Rng + ?Sized>(
    x: &Tensor,
    cbs: &[Codebook],
    order_drop_probs: &[f64],
    rng: Option<&mut R>,
) -> Result<QuantResult> {
    check_drop_probs(order_drop_probs, cbs.len())?;
    let keep = match rng {
        Some(rng) => sample_stream_drop(order_drop_probs, rng),
        None => cbs.len(),
    };
    product_quantize(x, cbs, keep)
}

/// A configured quantizer owning its codebooks.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantizer {
    config: QuantizerConfig,
    codebooks: Vec<Codebook>,
    order_drop_probs: Vec<f64>,
}

/// Drop distribution used when none is configured: never mask everything,
/// keep all streams most of the time, spread the rest evenly.
fn default_drop_probs(streams: usize) -> Vec<f64> {
    if streams == 1 {
        return vec![0.0, 1.0];
    }
    let partial = 0.3 / (streams - 1) as f64;
    let mut p = vec![0.0];
    p.extend(std::iter::repeat_n(partial, streams - 1));
    p.push(0.7);
    p
}

impl Quantizer {
    pub fn new(config: QuantizerConfig, decay: f64) -> Result<Self> {
        config.validate()?;
        let codebooks = (0..config.num_streams)
            .map(|_| Codebook::new(config.codebook_size, config.stream_dim(), decay))
            .collect::<Result<Vec<_>>>()?;
        let order_drop_probs = default_drop_probs(config.num_streams);
        Ok(Self {
            config,
            codebooks,
            order_drop_probs,
        })
    }

    pub fn from_codebooks(config: QuantizerConfig, codebooks: Vec<Codebook>) -> Result<Self> {
        config.validate()?;
        if codebooks.len() != config.num_streams
            || codebooks
                .iter()
                .any(|cb| cb.size() != config.codebook_size || cb.dim() != config.stream_dim())
        {
            return Err(QuantError::Config("codebooks do not match the quantizer config".into()));
        }
        let order_drop_probs = default_drop_probs(config.num_streams);
        Ok(Self {
            config,
            codebooks,
            order_drop_probs,
        })
    }

    pub fn with_drop_probs(mut self, probs: Vec<f64>) -> Result<Self> {
        check_drop_probs(&probs, self.config.num_streams)?;
        self.order_drop_probs = probs;
        Ok(self)
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.config
    }

    pub fn codebooks(&self) -> &[Codebook] {
        &self.codebooks
    }

    pub fn drop_probs(&self) -> &[f64] {
        &self.order_drop_probs
    }

    pub fn is_initialized(&self) -> bool {
        self.codebooks.iter().all(Codebook::is_initialized)
    }

    /// Inference quantization, never masked.
    pub fn quantize(&self, x: &Tensor) -> Result<QuantResult> {
        match self.config.mode {
            QuantMode::Vq => vq_quantize(x, &self.codebooks[0]),
            QuantMode::Rq => rq_quantize(x, &self.codebooks),
            QuantMode::Pq | QuantMode::Opq => pq_quantize(x, &self.codebooks),
        }
    }

    /// Training quantization: OPQ draws a stream suffix to mask.
    pub fn quantize_train<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<QuantResult> {
        match self.config.mode {
            QuantMode::Opq => opq_quantize(x, &self.codebooks, &self.order_drop_probs, Some(rng)),
            _ => self.quantize(x),
        }
    }

    /// Codeword lookup for a `T × num_streams` index grid.
    pub fn decode(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.config.num_streams;
        if !indices.len().is_multiple_of(s) {
            return Err(QuantError::Input(format!("{} indices for {s} streams", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= self.config.codebook_size) {
            return Err(QuantError::Input(format!("index {bad} outside codebook")));
        }
        let t_len = indices.len() / s;
        let d = self.config.dim;
        let sub = self.config.stream_dim();
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            let row = &mut out[t * d..(t + 1) * d];
            for (j, cb) in self.codebooks.iter().enumerate() {
                let cw = cb.codeword(indices[t * s + j]);
                if self.config.mode.is_product() {
                    row[j * sub..(j + 1) * sub].copy_from_slice(cw);
                } else {
                    for (r, c) in row.iter_mut().zip(cw) {
                        *r += c;
                    }
                }
            }
        }
        Ok(Tensor::new(vec![t_len, d], out)?)
    }

    /// What each stream's codebook sees for input `x`.
    fn stream_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        check_frames(x, self.config.dim)?;
        match self.config.mode {
            QuantMode::Vq => Ok(vec![x.clone()]),
            QuantMode::Rq => rq_stage_inputs(x, &self.codebooks),
            QuantMode::Pq | QuantMode::Opq => {
                let sub = self.config.stream_dim();
                (0..self.config.num_streams)
                    .map(|j| {
                        let data = (0..x.rows())
                            .flat_map(|t| x.row(t)[j * sub..(j + 1) * sub].to_vec())
                            .collect();
                        Ok(Tensor::new(vec![x.rows(), sub], data)?)
                    })
                    .collect()
            }
        }
    }

    /// Data-dependent initialization of any codebook still uninitialized.
    /// RQ stages are seeded in order so later stages see real residuals.
    pub fn ensure_initialized<R: Rng + ?Sized>(&mut self, x: &Tensor, rng: &mut R) -> Result<()> {
        for j in 0..self.codebooks.len() {
            if self.codebooks[j].is_initialized() {
                continue;
            }
            let input = if self.config.mode == QuantMode::Rq {
                rq_stage_inputs(x, &self.codebooks[..=j])?.pop().expect("stage")
            } else {
                self.stream_inputs(x)?.swap_remove(j)
            };
            self.codebooks[j].init_from_data(&input, rng)?;
        }
        Ok(())
    }

    /// EMA step for every stream using the inference assignments of `x`.
    pub fn ema_update(&mut self, x: &Tensor) -> Result<()> {
        let inputs = self.stream_inputs(x)?;
        for (cb, input) in self.codebooks.iter_mut().zip(&inputs) {
            let assign: Vec<usize> = (0..input.rows()).map(|t| cb.nearest(input.row(t)).0).collect();
            ema_update(cb, input, &assign)?;
        }
        Ok(())
    }

    /// Dead-code reset for every stream; `threshold = None` uses
    /// `0.03 · frames / K`. Returns the total number of reset codewords.
    pub fn dead_code_reinit<R: Rng + ?Sized>(
        &mut self,
        x: &Tensor,
        threshold: Option<f64>,
        rng: &mut R,
    ) -> Result<usize> {
        let inputs = self.stream_inputs(x)?;
        let threshold = threshold.unwrap_or(0.03 * x.rows() as f64 / self.config.codebook_size as f64);
        let mut total = 0;
        for (cb, input) in self.codebooks.iter_mut().zip(&inputs) {
            total += dead_code_reinit(cb, input, threshold, rng)?;
        }
        Ok(total)
    }
}
