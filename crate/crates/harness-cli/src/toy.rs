//! Deterministic synthetic speech-like corpus for overfit experiments.
//!
//! Each character becomes a 60 ms segment of two partials over a constant
//! harmonic floor. All frequencies are multiples of 100 Hz, so with a 10 ms
//! hop every frame of a segment sees the same phases and the spectrogram is
//! piecewise constant. Two voices differ in partial offsets and floor tilt.

use dsp_frontend::{Waveform, SAMPLE_RATE};

pub const SEGMENT_SAMPLES: usize = 960;
/// Utterances are padded with floor-only audio to a multiple of 120 ms.
pub const PAD_SAMPLES: usize = 1920;

pub const TOY_TEXTS: [&str; 10] = [
    "a bad cafe",
    "bead face",
    "fade a deed",
    "cab bag",
    "deaf dad",
    "ace faced",
    "a dead bee",
    "feed cab",
    "bad egg ace",
    "cage beef",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ToyItem {
    pub name: String,
    pub text: String,
    pub voice: usize,
    pub audio: Waveform,
}

/// Partial frequencies (Hz) for a character and voice; `None` is a pause.
fn partials(c: char, voice: usize) -> Option<(f64, f64)> {
    let idx = match c {
        'a'..='z' => c as usize - 'a' as usize,
        _ => return None,
    };
    let low = 300.0 + 100.0 * ((idx * 3) % 8) as f64 + 100.0 * voice as f64;
    let high = 1500.0 + 200.0 * ((idx * 5) % 9) as f64 + 300.0 * voice as f64;
    Some((low, high))
}

fn floor_sample(n: usize, voice: usize) -> f64 {
    let t = n as f64 / SAMPLE_RATE as f64;
    let tilt = if voice == 0 { 1.0 } else { 0.5 };
    (1..80)
        .map(|k| {
            let amp = 0.004 * (k as f64 / 10.0 + 1.0).powf(-tilt);
            let phase = (k * k * (voice + 3)) as f64 * 0.37;
            amp * (std::f64::consts::TAU * 100.0 * k as f64 * t + phase).sin()
        })
        .sum()
}

/// Synthesizes one utterance for `text` in `voice` (0 or 1).
pub fn synthesize_text(text: &str, voice: usize) -> Waveform {
    let chars: Vec<char> = text.chars().collect();
    let body = chars.len() * SEGMENT_SAMPLES;
    let total = (body + SEGMENT_SAMPLES).div_ceil(PAD_SAMPLES) * PAD_SAMPLES;
    let lead = SEGMENT_SAMPLES / 2;
    let ramp = 160;
    let mut samples = Vec::with_capacity(total);
    for n in 0..total {
        let mut v = floor_sample(n, voice);
        if n >= lead && n < lead + body {
            let local = n - lead;
            let seg = local / SEGMENT_SAMPLES;
            let pos = local % SEGMENT_SAMPLES;
            if let Some((f1, f2)) = partials(chars[seg], voice) {
                let edge = pos.min(SEGMENT_SAMPLES - 1 - pos);
                let env = if edge < ramp {
                    0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                let t = n as f64 / SAMPLE_RATE as f64;
                let tau = std::f64::consts::TAU;
                v += env * (0.3 * (tau * f1 * t).sin() + 0.15 * (tau * f2 * t).sin());
            }
        }
        samples.push(v);
    }
    Waveform::new(samples, SAMPLE_RATE).expect("non-empty")
}

/// The ten-utterance corpus, alternating voices.
pub fn toy_corpus() -> Vec<ToyItem> {
    TOY_TEXTS
        .iter()
        .enumerate()
        .map(|(i, text)| ToyItem {
            name: format!("toy_{i:02}"),
            text: text.to_string(),
            voice: i % 2,
            audio: synthesize_text(text, i % 2),
        })
        .collect()
}
