use std::f64::consts::{LN_10, PI};

use crate::mel::MelSpectrogram;
use crate::{DspError, Result, N_MELS};

/// Cepstral coefficients 1..=13 enter the distortion; c0 (energy) is excluded.
pub const MCD_COEFFS: usize = 13;

fn dct_basis(n: usize, k: usize, i: usize) -> f64 {
    let scale = if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    };
    scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
}

fn dct_row(frame: &[f64], n_coeffs: usize) -> Vec<f64> {
    let n = frame.len();
    (0..n_coeffs)
        .map(|k| frame.iter().enumerate().map(|(i, v)| v * dct_basis(n, k, i)).sum())
        .collect()
}

/// Orthonormal DCT-II of each log-Mel frame, truncated to `n_coeffs`.
pub fn mel_cepstrum(m: &MelSpectrogram, n_coeffs: usize) -> Result<Vec<Vec<f64>>> {
    if !(1..=N_MELS).contains(&n_coeffs) {
        return Err(DspError::Input(format!(
            "n_coeffs must be in 1..={N_MELS}, got {n_coeffs}"
        )));
    }
    Ok(m.frames().map(|f| dct_row(f, n_coeffs)).collect())
}

/// Inverse of the orthonormal DCT-II (a DCT-III), zero-extending missing coefficients.
pub fn idct_orthonormal(coeffs: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| coeffs.iter().enumerate().map(|(k, c)| c * dct_basis(n, k, i)).sum())
        .collect()
}

/// Mel-cepstral distortion in dB between time-aligned spectrograms:
/// mean over frames of `(10/ln 10)·sqrt(2·Σ_{d=1..13} (c_d − c'_d)²)`.
pub fn mcd(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.n_frames() != b.n_frames() {
        return Err(DspError::Input(format!(
            "frame counts differ: {} vs {}",
            a.n_frames(),
            b.n_frames()
        )));
    }
    let ca = mel_cepstrum(a, MCD_COEFFS + 1)?;
    let cb = mel_cepstrum(b, MCD_COEFFS + 1)?;
    let k = 10.0 / LN_10;
    let total: f64 = ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| {
            let sq: f64 = x[1..].iter().zip(&y[1..]).map(|(p, q)| (p - q) * (p - q)).sum();
            k * (2.0 * sq).sqrt()
        })
        .sum();
    Ok(total / ca.len() as f64)
}
