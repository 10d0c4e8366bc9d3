use rand::seq::SliceRandom;
use rand::Rng;
use tensor_core::Tensor;

use crate::{QuantError, Result};

/// Floor on EMA counts when normalizing sums back into codewords.
pub const EMA_COUNT_FLOOR: f64 = 1e-5;

/// `K` codewords of dimension `D` with their EMA statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    codewords: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    decay: f64,
    initialized: bool,
}

impl Codebook {
    /// Zero codebook awaiting data-dependent initialization.
    pub fn new(size: usize, dim: usize, decay: f64) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(QuantError::Config(format!("codebook {size}×{dim} is empty")));
        }
        Ok(Self {
            size,
            dim,
            codewords: vec![0.0; size * dim],
            ema_counts: vec![0.0; size],
            ema_sums: vec![0.0; size * dim],
            decay,
            initialized: false,
        })
    }

    /// Codebook with explicit codewords; each starts with an EMA count of 1.
    pub fn from_codewords(size: usize, dim: usize, codewords: Vec<f64>, decay: f64) -> Result<Self> {
        if codewords.len() != size * dim {
            return Err(QuantError::Config(format!(
                "{} values for a {size}×{dim} codebook",
                codewords.len()
            )));
        }
        let mut cb = Self::new(size, dim, decay)?;
        cb.ema_sums = codewords.clone();
        cb.codewords = codewords;
        cb.ema_counts = vec![1.0; size];
        cb.initialized = true;
        Ok(cb)
    }

    /// Restores a codebook from persisted state.
    pub fn from_state(
        size: usize,
        dim: usize,
        codewords: Vec<f64>,
        ema_counts: Vec<f64>,
        ema_sums: Vec<f64>,
        decay: f64,
        initialized: bool,
    ) -> Result<Self> {
        if codewords.len() != size * dim || ema_sums.len() != size * dim || ema_counts.len() != size {
            return Err(QuantError::Config("codebook state has inconsistent sizes".into()));
        }
        Ok(Self {
            size,
            dim,
            codewords,
            ema_counts,
            ema_sums,
            decay,
            initialized,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn codeword(&self, k: usize) -> &[f64] {
        &self.codewords[k * self.dim..(k + 1) * self.dim]
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    /// Index of the nearest codeword (squared Euclidean; ties → lowest index)
    /// and its squared distance.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size {
            let d: f64 = self.codeword(k).iter().zip(v).map(|(c, x)| (c - x) * (c - x)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Seeds codewords with `K` distinct rows of `x` when it has enough rows;
    /// otherwise rows are reused with a small jitter so codewords stay distinct.
    pub fn init_from_data<R: Rng + ?Sized>(&mut self, x: &Tensor, rng: &mut R) -> Result<()> {
        check_frames(x, self.dim)?;
        let t = x.rows();
        let mut order: Vec<usize> = (0..t).collect();
        order.shuffle(rng);
        for k in 0..self.size {
            let src = x.row(order[k % t]);
            let jitter = if k >= t { 1e-3 } else { 0.0 };
            let cw = &mut self.codewords[k * self.dim..(k + 1) * self.dim];
            for (c, s) in cw.iter_mut().zip(src) {
                *c = s + if jitter > 0.0 {
                    rng.gen_range(-jitter..jitter)
                } else {
                    0.0
                };
            }
        }
        self.ema_sums = self.codewords.clone();
        self.ema_counts = vec![1.0; self.size];
        self.initialized = true;
        Ok(())
    }
}

pub(crate) fn check_frames(x: &Tensor, dim: usize) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != dim {
        return Err(QuantError::Input(format!(
            "expected T×{dim} frames, got shape {:?}",
            x.shape()
        )));
    }
    if x.rows() == 0 {
        return Err(QuantError::Input("no frames".into()));
    }
    Ok(())
}

/// One EMA step with the codebook's decay `γ`:
/// `counts ← γ·counts + (1−γ)·n_k`, `sums ← γ·sums + (1−γ)·Σx`, and every
/// codeword that received assignments becomes `sums/max(counts, 1e-5)`.
pub fn ema_update(cb: &mut Codebook, x: &Tensor, assignments: &[usize]) -> Result<()> {
    check_frames(x, cb.dim)?;
    if assignments.len() != x.rows() {
        return Err(QuantError::Input(format!(
            "{} assignments for {} frames",
            assignments.len(),
            x.rows()
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= cb.size) {
        return Err(QuantError::Input(format!(
            "assignment {bad} outside codebook of {}",
            cb.size
        )));
    }
    let d = cb.dim;
    let mut counts = vec![0.0; cb.size];
    let mut sums = vec![0.0; cb.size * d];
    for (t, &k) in assignments.iter().enumerate() {
        counts[k] += 1.0;
        for (s, v) in sums[k * d..(k + 1) * d].iter_mut().zip(x.row(t)) {
            *s += v;
        }
    }
    let g = cb.decay;
    for k in 0..cb.size {
        cb.ema_counts[k] = g * cb.ema_counts[k] + (1.0 - g) * counts[k];
        for j in 0..d {
            cb.ema_sums[k * d + j] = g * cb.ema_sums[k * d + j] + (1.0 - g) * sums[k * d + j];
        }
        if counts[k] > 0.0 {
            let n = cb.ema_counts[k].max(EMA_COUNT_FLOOR);
            for j in 0..d {
                cb.codewords[k * d + j] = cb.ema_sums[k * d + j] / n;
            }
        }
    }
    Ok(())
}

/// Resets every codeword whose EMA count is below `threshold` to a random
/// row of `x`, with count 1. Returns how many were reset.
pub fn dead_code_reinit<R: Rng + ?Sized>(cb: &mut Codebook, x: &Tensor, threshold: f64, rng: &mut R) -> Result<usize> {
    check_frames(x, cb.dim)?;
    let d = cb.dim;
    let mut reset = 0;
    for k in 0..cb.size {
        if cb.ema_counts[k] < threshold {
            let src = x.row(rng.gen_range(0..x.rows()));
            cb.codewords[k * d..(k + 1) * d].copy_from_slice(src);
            cb.ema_sums[k * d..(k + 1) * d].copy_from_slice(src);
            cb.ema_counts[k] = 1.0;
            reset += 1;
        }
    }
    Ok(reset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn repeated_identical_frames_converge_geometrically() {
        let mut cb = Codebook::from_codewords(1, 2, vec![0.0, 0.0], 0.99).unwrap();
        let v = [2.0, -1.0];
        let x = frames(&vec![v.to_vec(); 4]);
        let assign = vec![0; 4];
        let mut prev_err = f64::INFINITY;
        for _ in 0..300 {
            ema_update(&mut cb, &x, &assign).unwrap();
            let err = (cb.codeword(0)[0] - v[0]).abs();
            assert!(err < prev_err || err == 0.0);
            prev_err = err;
        }
        // count-normalized limit: error shrinks by ~0.99 per step
        let count_weight = 0.99f64.powi(300);
        let bound = count_weight * 2.0 / (count_weight + (1.0 - count_weight) * 4.0);
        assert!(prev_err <= bound * 1.0001, "{prev_err} > {bound}");
    }

    #[test]
    fn unassigned_codeword_is_unchanged() {
        let mut cb = Codebook::from_codewords(2, 1, vec![5.0, -5.0], 0.99).unwrap();
        let x = frames(&[vec![4.0], vec![6.0]]);
        for _ in 0..2000 {
            ema_update(&mut cb, &x, &[0, 0]).unwrap();
        }
        assert_eq!(cb.codeword(1), &[-5.0]);
        assert!(cb.ema_counts()[1] < EMA_COUNT_FLOOR);
    }

    #[test]
    fn ema_state_invariant_holds_for_updated_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cb = Codebook::new(4, 3, 0.99).unwrap();
        let x = Tensor::uniform(vec![20, 3], 1.0, &mut rng);
        cb.init_from_data(&x, &mut rng).unwrap();
        let assign: Vec<usize> = (0..20).map(|t| t % 3).collect();
        ema_update(&mut cb, &x, &assign).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                let expect = cb.ema_sums()[k * 3 + j] / cb.ema_counts()[k].max(EMA_COUNT_FLOOR);
                assert_eq!(cb.codeword(k)[j], expect);
            }
        }
    }

    #[test]
    fn ema_rejects_bad_assignment() {
        let mut cb = Codebook::from_codewords(2, 1, vec![0.0, 1.0], 0.99).unwrap();
        let x = frames(&[vec![0.5]]);
        assert!(ema_update(&mut cb, &x, &[2]).is_err());
        assert!(ema_update(&mut cb, &x, &[0, 1]).is_err());
    }

    #[test]
    fn init_uses_distinct_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = frames(&(0..10).map(|i| vec![i as f64, 0.0]).collect::<Vec<_>>());
        let mut cb = Codebook::new(6, 2, 0.99).unwrap();
        cb.init_from_data(&x, &mut rng).unwrap();
        let mut firsts: Vec<i64> = (0..6).map(|k| cb.codeword(k)[0] as i64).collect();
        firsts.sort();
        firsts.dedup();
        assert_eq!(firsts.len(), 6);

        let few = frames(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        let mut cb = Codebook::new(5, 2, 0.99).unwrap();
        cb.init_from_data(&few, &mut rng).unwrap();
        for a in 0..5 {
            for b in a + 1..5 {
                assert_ne!(cb.codeword(a), cb.codeword(b));
            }
        }
    }

    #[test]
    fn dead_code_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = frames(&[vec![7.0, 7.0], vec![8.0, 8.0], vec![9.0, 9.0]]);
        let mut cb = Codebook::from_codewords(3, 2, vec![0.0; 6], 0.99).unwrap();
        let before = cb.clone();
        assert_eq!(dead_code_reinit(&mut cb, &x, 0.0, &mut rng).unwrap(), 0);
        assert_eq!(cb, before);

        assert_eq!(dead_code_reinit(&mut cb, &x, 10.0, &mut rng).unwrap(), 3);
        for k in 0..3 {
            assert!((0..3).any(|t| cb.codeword(k) == x.row(t)));
        }
    }

    #[test]
    fn dead_code_post_condition_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(vec![16, 2], 1.0, &mut rng);
        for threshold in [0.0, 0.01, 0.5, 1.0, 3.0] {
            let mut cb = Codebook::new(8, 2, 0.99).unwrap();
            cb.init_from_data(&x, &mut rng).unwrap();
            let assign: Vec<usize> = (0..16).map(|t| (t * 7) % 3).collect();
            for _ in 0..50 {
                ema_update(&mut cb, &x, &assign).unwrap();
            }
            dead_code_reinit(&mut cb, &x, threshold, &mut rng).unwrap();
            let floor = threshold.min(1.0);
            assert!(cb.ema_counts().iter().all(|&c| c >= floor), "threshold {threshold}");
        }
    }
}
