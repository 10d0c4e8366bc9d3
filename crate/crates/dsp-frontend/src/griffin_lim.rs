use rustfft::num_complex::Complex64;

use crate::filterbank::MelFilterbank;
use crate::mel::{MelSpectrogram, Waveform};
use crate::stft::Stft;
use crate::{HOP, SAMPLE_RATE};

pub const DEFAULT_GL_ITERS: usize = 32;

/// Mel → waveform via the filterbank pseudo-inverse and iterative phase
/// recovery from a zero-phase start. Output has `T·160` samples.
pub fn griffin_lim(m: &MelSpectrogram, iters: usize) -> Waveform {
    let fb = MelFilterbank::default();
    let pinv = fb.as_matrix().pseudo_inverse(1e-10).expect("filterbank pseudo-inverse");
    let n_bins = fb.n_bins();
    let n_frames = m.n_frames();
    let mags: Vec<Vec<f64>> = m
        .frames()
        .map(|f| {
            let mel_power = nalgebra::DVector::from_iterator(f.len(), f.iter().map(|v| v.exp()));
            let lin = &pinv * mel_power;
            (0..n_bins).map(|b| lin[b].max(0.0).sqrt()).collect()
        })
        .collect();
    let stft = Stft::new();
    let len = n_frames * HOP;
    let mut spec: Vec<Vec<Complex64>> = mags
        .iter()
        .map(|row| row.iter().map(|&a| Complex64::new(a, 0.0)).collect())
        .collect();
    let mut samples = stft.inverse(&spec, len);
    for _ in 0..iters.max(1) {
        let est = stft.forward(&samples, n_frames);
        for (t, frame) in est.iter().enumerate() {
            for (b, c) in frame.iter().enumerate() {
                let n = c.norm();
                spec[t][b] = if n > 1e-12 {
                    c * (mags[t][b] / n)
                } else {
                    Complex64::new(mags[t][b], 0.0)
                };
            }
        }
        samples = stft.inverse(&spec, len);
    }
    for s in samples.iter_mut() {
        *s = s.clamp(-1.0, 1.0);
    }
    Waveform {
        samples,
        sample_rate: SAMPLE_RATE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{log_floor, mel_spectrogram, N_MELS};

    #[test]
    fn floor_input_is_near_silent() {
        let m = MelSpectrogram::from_flat(vec![log_floor(); 12 * N_MELS]).unwrap();
        let w = griffin_lim(&m, 4);
        assert_eq!(w.samples.len(), 12 * HOP);
        assert!(w.samples.iter().all(|s| s.abs() < 1e-3));
    }

    #[test]
    fn deterministic_and_finite() {
        let tone: Vec<f64> = (0..4000).map(|i| 0.4 * (i as f64 * 0.2).sin()).collect();
        let m = mel_spectrogram(&Waveform::new(tone, SAMPLE_RATE).unwrap()).unwrap();
        let a = griffin_lim(&m, 3);
        let b = griffin_lim(&m, 3);
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), m.n_frames() * HOP);
        assert!(a.samples.iter().all(|s| s.is_finite()));
        assert!(a.samples.iter().any(|s| s.abs() > 1e-3));
    }
}
