use rand::Rng;

use crate::{LmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub top_k: usize,
    pub repetition_penalty: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.8,
            top_k: 50,
            repetition_penalty: 2.0,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    /// Argmax decoding.
    pub fn greedy() -> Self {
        Self {
            top_p: 1.0,
            top_k: 1,
            repetition_penalty: 1.0,
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LmError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(LmError::Config("top_k must be at least 1".into()));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(LmError::Config(format!(
                "repetition penalty {} below 1",
                self.repetition_penalty
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LmError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// CTRL rule: positive logits of tokens seen in `history` are divided by
/// the penalty, negative ones multiplied. Each token is penalized once.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[u32], penalty: f64) {
    if penalty == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in history {
        let t = t as usize;
        if t < logits.len() && !seen[t] {
            seen[t] = true;
            let l = &mut logits[t];
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Penalty, then top-k, then nucleus truncation (on the untempered
/// distribution), then a tempered categorical draw. Logits of `-inf` are
/// never drawn.
pub fn sample_next<R: Rng + ?Sized>(logits: &[f64], history: &[u32], cfg: &SamplerConfig, rng: &mut R) -> Result<u32> {
    cfg.validate()?;
    let mut l = logits.to_vec();
    apply_repetition_penalty(&mut l, history, cfg.repetition_penalty);
    let mut order: Vec<usize> = (0..l.len()).filter(|&i| l[i] > f64::NEG_INFINITY).collect();
    if order.is_empty() {
        return Err(LmError::Input("no finite logits to sample from".into()));
    }
    if l.iter().any(|v| v.is_nan()) {
        return Err(LmError::Input("NaN logit".into()));
    }
    // stable: equal logits keep index order
    order.sort_by(|&a, &b| l[b].total_cmp(&l[a]));
    order.truncate(cfg.top_k);
    if order.len() == 1 {
        return Ok(order[0] as u32);
    }

    let max = l[order[0]];
    let p: Vec<f64> = order.iter().map(|&i| (l[i] - max).exp()).collect();
    let z: f64 = p.iter().sum();
    let mut keep = order.len();
    if cfg.top_p < 1.0 {
        let mut acc = 0.0;
        for (n, pi) in p.iter().enumerate() {
            acc += pi / z;
            if acc >= cfg.top_p {
                keep = n + 1;
                break;
            }
        }
    }
    order.truncate(keep);

    let w: Vec<f64> = order.iter().map(|&i| ((l[i] - max) / cfg.temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (&i, wi) in order.iter().zip(&w) {
        if u < *wi {
            return Ok(i as u32);
        }
        u -= wi;
    }
    Ok(*order.last().expect("non-empty") as u32)
}
