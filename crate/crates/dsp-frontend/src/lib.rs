//! Audio frontend: 80-band log-Mel spectrograms at a 10 ms hop, Mel-cepstral
//! distortion for scoring reconstructions, a Griffin-Lim inverse so Mel
//! output can be auditioned without a neural vocoder, and 16-bit PCM WAV I/O.

mod cepstrum;
mod filterbank;
mod griffin_lim;
mod mel;
mod stft;
mod wav;

use thiserror::Error;

pub use cepstrum::{idct_orthonormal, mcd, mel_cepstrum, MCD_COEFFS};
pub use filterbank::MelFilterbank;
pub use griffin_lim::{griffin_lim, DEFAULT_GL_ITERS};
pub use mel::{mel_spectrogram, MelSpectrogram, Waveform};
pub use wav::{read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 1024;
pub const HOP: usize = 160;
pub const N_MELS: usize = 80;
pub const HOP_MS: usize = 10;
pub const LOG_FLOOR: f64 = 1e-10;

/// `ln(LOG_FLOOR)`, the value silence maps to.
pub fn log_floor() -> f64 {
    LOG_FLOOR.ln()
}

#[derive(Debug, Error)]
pub enum DspError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;
