use crate::filterbank::MelFilterbank;
use crate::stft::Stft;
use crate::{DspError, Result, HOP, HOP_MS, LOG_FLOOR, N_MELS, SAMPLE_RATE};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(DspError::Input("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(DspError::Input("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `T × 80` natural-log Mel energies at a 10 ms hop, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<f64>,
}

impl MelSpectrogram {
    pub const N_MELS: usize = N_MELS;
    pub const HOP_MS: usize = HOP_MS;

    pub fn from_flat(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() || !data.len().is_multiple_of(N_MELS) {
            return Err(DspError::Input(format!(
                "{} values is not a positive multiple of {N_MELS}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DspError::Input("non-finite Mel value".into()));
        }
        Ok(Self { data })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        if frames.iter().any(|f| f.len() != N_MELS) {
            return Err(DspError::Input(format!("frames must have {N_MELS} bands")));
        }
        Self::from_flat(frames.concat())
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / N_MELS
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(N_MELS)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n_frames() {
            return Err(DspError::Input(format!(
                "cannot keep {n} of {} frames",
                self.n_frames()
            )));
        }
        Ok(Self {
            data: self.data[..n * N_MELS].to_vec(),
        })
    }
}

/// Centered STFT (n_fft 1024, Hann, hop 160) → power → HTK Mel filterbank →
/// `ln(max(e, 1e-10))`. Produces `ceil(len/160)` frames.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    if w.samples.is_empty() {
        return Err(DspError::Input("empty waveform".into()));
    }
    if w.sample_rate != SAMPLE_RATE {
        return Err(DspError::Input(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz",
            w.sample_rate
        )));
    }
    let n_frames = w.samples.len().div_ceil(HOP);
    let stft = Stft::new();
    let fb = MelFilterbank::default();
    let spec = stft.forward(&w.samples, n_frames);
    let mut data = vec![0.0; n_frames * N_MELS];
    let mut power = vec![0.0; fb.n_bins()];
    for (t, frame) in spec.iter().enumerate() {
        for (p, c) in power.iter_mut().zip(frame) {
            *p = c.norm_sqr();
        }
        let out = &mut data[t * N_MELS..(t + 1) * N_MELS];
        fb.apply(&power, out);
        for v in out.iter_mut() {
            *v = v.max(LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::from_flat(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        Waveform::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_100_frames() {
        let m = mel_spectrogram(&sine(440.0, 0.1, 16000)).unwrap();
        assert_eq!(m.n_frames(), 100);
        assert_eq!(m.frame(0).len(), 80);
        let m = mel_spectrogram(&sine(440.0, 0.1, 16001)).unwrap();
        assert_eq!(m.n_frames(), 101);
    }

    #[test]
    fn silence_hits_the_floor() {
        let w = Waveform::new(vec![0.0; 3200], SAMPLE_RATE).unwrap();
        let m = mel_spectrogram(&w).unwrap();
        assert!(m.as_flat().iter().all(|v| *v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_peak_band_is_stable() {
        let m = mel_spectrogram(&sine(1000.0, 0.5, 16000)).unwrap();
        let argmax = |f: &[f64]| {
            f.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let first = argmax(m.frame(5));
        for t in 5..m.n_frames() - 5 {
            assert_eq!(argmax(m.frame(t)), first);
        }
        // band center near 1 kHz
        let fb = MelFilterbank::default();
        let peak_bin = fb
            .filter(first)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let hz = peak_bin as f64 * 16000.0 / 1024.0;
        assert!((hz - 1000.0).abs() < 60.0, "peak band centered at {hz}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Waveform::new(vec![], SAMPLE_RATE).is_err());
        let w = Waveform::new(vec![0.1; 100], 22050).unwrap();
        assert!(mel_spectrogram(&w).is_err());
    }

    #[test]
    fn prepending_one_hop_shifts_frames() {
        let base: Vec<f64> = (0..8000)
            .map(|i| 0.3 * (i as f64 * 0.031).sin() + 0.1 * (i as f64 * 0.0071).cos())
            .collect();
        let mut shifted = vec![0.0; HOP];
        shifted.extend_from_slice(&base);
        let a = mel_spectrogram(&Waveform::new(base, SAMPLE_RATE).unwrap()).unwrap();
        let b = mel_spectrogram(&Waveform::new(shifted, SAMPLE_RATE).unwrap()).unwrap();
        // interior frames: window fully inside the original signal
        for t in 4..a.n_frames() - 4 {
            for (x, y) in a.frame(t).iter().zip(b.frame(t + 1)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
