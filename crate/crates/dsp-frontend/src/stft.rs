use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{HOP, N_FFT};

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

pub struct Stft {
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window: hann(N_FFT),
            fwd: planner.plan_fft_forward(N_FFT),
            inv: planner.plan_fft_inverse(N_FFT),
        }
    }

    /// Centered STFT with reflect padding; frame `t` is centered on sample `t·HOP`.
    pub fn forward(&self, samples: &[f64], n_frames: usize) -> Vec<Vec<Complex64>> {
        let half = (N_FFT / 2) as isize;
        let mut frames = Vec::with_capacity(n_frames);
        let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
        for t in 0..n_frames {
            let start = (t * HOP) as isize - half;
            for (i, b) in buf.iter_mut().enumerate() {
                let s = samples[reflect(start + i as isize, samples.len())];
                *b = Complex64::new(s * self.window[i], 0.0);
            }
            self.fwd.process(&mut buf);
            frames.push(buf[..N_FFT / 2 + 1].to_vec());
        }
        frames
    }

    /// Weighted overlap-add inverse of [`Stft::forward`]; returns `len` samples.
    pub fn inverse(&self, frames: &[Vec<Complex64>], len: usize) -> Vec<f64> {
        let half = N_FFT / 2;
        let padded = len + N_FFT;
        let mut out = vec![0.0; padded];
        let mut norm = vec![0.0; padded];
        let mut buf = vec![Complex64::new(0.0, 0.0); N_FFT];
        for (t, spec) in frames.iter().enumerate() {
            for k in 0..=half {
                buf[k] = spec[k];
            }
            for k in half + 1..N_FFT {
                buf[k] = spec[N_FFT - k].conj();
            }
            self.inv.process(&mut buf);
            let start = t * HOP;
            for i in 0..N_FFT {
                if start + i >= padded {
                    break;
                }
                let w = self.window[i];
                out[start + i] += buf[i].re / N_FFT as f64 * w;
                norm[start + i] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let n = norm[i + half];
                if n > 1e-8 {
                    out[i + half] / n
                } else {
                    0.0
                }
            })
            .collect()
    }
}
