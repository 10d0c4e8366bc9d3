use cofi_codec::{MultiScaleTokens, ScaleSpec, TokenGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor_core::Tensor;

use crate::icl::IclPrompt;
use crate::model::{Additive, LmInput, LmModel};
use crate::sampler::{sample_next, SamplerConfig};
use crate::vocab::Vocabulary;
use crate::{LmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub sampler: SamplerConfig,
    /// Upper bound on coarsest-scale frames before generation is abandoned.
    pub max_coarse_frames: usize,
    /// Replace the hidden-state conditioning of finer stack stages with zeros.
    pub zero_condition: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            max_coarse_frames: 250,
            zero_condition: false,
        }
    }
}

struct Cursor<'a> {
    model: &'a LmModel,
    vocab: &'a Vocabulary,
    input: LmInput,
    sampler: &'a SamplerConfig,
    rng: ChaCha8Rng,
}

/// How a scale ends.
#[derive(Clone, Copy)]
enum End {
    /// The model emits this id (on stream 0).
    Token(u32),
    /// Exactly this many frames.
    Fixed(usize),
}

impl Cursor<'_> {
    fn push(&mut self, ids: &[Option<u32>]) -> usize {
        let s = self.model.config().streams;
        let mut pos = vec![self.vocab.pad(); s];
        for (p, id) in pos.iter_mut().zip(ids) {
            if let Some(id) = id {
                *p = *id;
            }
        }
        self.input.tokens.push(pos);
        self.input.tokens.len() - 1
    }

    fn push_single(&mut self, id: u32) -> usize {
        self.push(&[Some(id)])
    }

    fn last_logits(&self) -> Result<Vec<Vec<f64>>> {
        let out = self.model.forward(&self.input)?;
        let last = self.input.tokens.len() - 1;
        Ok(out.logits.iter().map(|l| l.row(last).to_vec()).collect())
    }

    fn draw(&mut self, logits: &[f64], allowed: &[std::ops::Range<u32>], history: &[u32]) -> Result<u32> {
        let mut masked = vec![f64::NEG_INFINITY; logits.len()];
        for r in allowed {
            for id in r.clone() {
                masked[id as usize] = logits[id as usize];
            }
        }
        sample_next(&masked, history, self.sampler, &mut self.rng)
    }

    /// Generates one scale after its reference frames; returns the frame
    /// grid and the positions holding each frame as input.
    fn scale(&mut self, scale: usize, reference: &TokenGrid, end: End, cap: usize) -> Result<(TokenGrid, Vec<usize>)> {
        if reference.streams == 1 {
            self.single_stream(scale, reference, end, cap)
        } else {
            self.multi_stream(scale, reference, end, cap)
        }
    }

    fn single_stream(
        &mut self,
        scale: usize,
        reference: &TokenGrid,
        end: End,
        cap: usize,
    ) -> Result<(TokenGrid, Vec<usize>)> {
        let v = self.vocab;
        let mut codes = Vec::new();
        let mut positions = Vec::new();
        for &c in &reference.data {
            positions.push(self.push_single(v.speech_id(scale, c)));
            codes.push(c);
        }
        let mut history = Vec::new();
        loop {
            if let End::Fixed(n) = end {
                if codes.len() >= n {
                    break;
                }
            }
            if codes.len() > cap {
                return Err(LmError::Alignment(format!(
                    "scale {scale} ran past {cap} frames without ending"
                )));
            }
            let logits = self.last_logits()?;
            let mut allowed = vec![v.speech_range(scale)];
            if let End::Token(t) = end {
                allowed.push(t..t + 1);
            }
            let id = self.draw(&logits[0], &allowed, &history)?;
            if let End::Token(t) = end {
                if id == t {
                    if codes.is_empty() {
                        return Err(LmError::Generation {
                            scale,
                            position: self.input.tokens.len(),
                            detail: "end token before any speech token".into(),
                        });
                    }
                    self.push_single(t);
                    break;
                }
            }
            history.push(id);
            positions.push(self.push_single(id));
            codes.push(v.speech_code(scale, id).expect("restricted to the scale range"));
        }
        Ok((TokenGrid::new(codes.len(), 1, codes)?, positions))
    }

    fn multi_stream(
        &mut self,
        scale: usize,
        reference: &TokenGrid,
        end: End,
        cap: usize,
    ) -> Result<(TokenGrid, Vec<usize>)> {
        let v = self.vocab;
        let s = reference.streams;
        let mut frames: Vec<Vec<Option<u32>>> = Vec::new();
        let mut len = match end {
            End::Fixed(n) => Some(n),
            End::Token(_) => None,
        };
        let marker = match end {
            End::Token(t) => Some(t),
            End::Fixed(_) => None,
        };
        let mut positions = Vec::new();
        let mut history = Vec::new();
        let mut t = 0;
        loop {
            if let Some(n) = len {
                let steps = (n + s - 1).max(n + usize::from(marker.is_some()));
                if t >= steps {
                    break;
                }
            } else if t > cap {
                return Err(LmError::Alignment(format!(
                    "scale {scale} ran past {cap} frames without ending"
                )));
            }
            let mut step: Vec<Option<u32>> = vec![None; s];
            let mut logits: Option<Vec<Vec<f64>>> = None;
            for j in 0..s {
                if t < j {
                    continue;
                }
                let f = t - j;
                if len.is_some_and(|n| f >= n) {
                    continue;
                }
                if f >= frames.len() {
                    frames.push(vec![None; s]);
                }
                if f < reference.frames {
                    let c = reference.get(f, j);
                    frames[f][j] = Some(c);
                    step[j] = Some(v.speech_id(scale, c));
                    continue;
                }
                if logits.is_none() {
                    logits = Some(self.last_logits()?);
                }
                let mut allowed = vec![v.speech_range(scale)];
                let can_end = j == 0 && f > 0;
                if let (Some(m), true) = (marker, can_end) {
                    allowed.push(m..m + 1);
                }
                let id = self.draw(&logits.as_ref().expect("computed")[j], &allowed, &history)?;
                if Some(id) == marker {
                    frames.pop();
                    step[0] = Some(id);
                    len = Some(f);
                    continue;
                }
                history.push(id);
                frames[f][j] = Some(v.speech_code(scale, id).expect("restricted to the scale range"));
                step[j] = Some(id);
            }
            let p = self.push(&step);
            if t < len.unwrap_or(usize::MAX) && t < frames.len() {
                positions.push(p);
            }
            t += 1;
        }
        let n = len.expect("loop ends with a length");
        positions.truncate(n);
        let mut data = Vec::with_capacity(n * s);
        for (f, row) in frames.iter().take(n).enumerate() {
            for (j, c) in row.iter().enumerate() {
                data.push(c.ok_or_else(|| LmError::Generation {
                    scale,
                    position: f,
                    detail: format!("stream {j} left without a token"),
                })?);
            }
        }
        Ok((TokenGrid::new(n, s, data)?, positions))
    }
}

fn check_prompt(prompt: &IclPrompt, spec: &ScaleSpec, vocab: &Vocabulary) -> Result<()> {
    if vocab.num_scales() != spec.num_scales() || prompt.reference.len() != spec.num_scales() {
        return Err(LmError::Input(format!(
            "prompt has {} scales, vocabulary {}, spec {}",
            prompt.reference.len(),
            vocab.num_scales(),
            spec.num_scales()
        )));
    }
    for (i, g) in prompt.reference.iter().enumerate() {
        if g.streams != spec.num_streams[i] {
            return Err(LmError::Input(format!("reference scale {i} has {} streams", g.streams)));
        }
    }
    Ok(())
}

/// Fits a generated length to `expected`, tolerating one coarse frame
/// (`ratio` fine frames) of disagreement; extra frames are dropped and
/// missing ones repeat the last frame.
fn fit_length(grid: TokenGrid, expected: usize, ratio: usize, scale: usize) -> Result<TokenGrid> {
    if grid.frames.abs_diff(expected) > ratio {
        return Err(LmError::Alignment(format!(
            "scale {scale} produced {} frames, expected {expected} ± {ratio}",
            grid.frames
        )));
    }
    let s = grid.streams;
    let mut data = grid.data;
    data.truncate(expected * s);
    while data.len() < expected * s {
        let last = data[data.len() - s..].to_vec();
        data.extend(last);
    }
    Ok(TokenGrid::new(expected, s, data)?)
}

fn ratio(spec: &ScaleSpec, i: usize) -> usize {
    spec.frameshift_ms[i - 1] / spec.frameshift_ms[i]
}

/// Chain-of-scale generation with one model over all scales.
pub fn generate_cos(
    model: &LmModel,
    vocab: &Vocabulary,
    spec: &ScaleSpec,
    prompt: &IclPrompt,
    opts: &GenerateOptions,
) -> Result<MultiScaleTokens> {
    check_prompt(prompt, spec, vocab)?;
    let mut c = Cursor {
        model,
        vocab,
        input: LmInput {
            g: Some(prompt.g.g.clone()),
            ..Default::default()
        },
        sampler: &opts.sampler,
        rng: ChaCha8Rng::seed_from_u64(opts.sampler.seed),
    };
    c.push_single(vocab.bos());
    for &t in &prompt.text_ids {
        c.push_single(t);
    }
    c.push_single(vocab.sep_text());
    c.push_single(vocab.sep_scale(0));
    let n = spec.num_scales();
    let mut grids: Vec<TokenGrid> = Vec::with_capacity(n);
    for i in 0..n {
        let last = i + 1 == n;
        let (end, cap) = if i == 0 {
            let term = if last { vocab.eos() } else { vocab.sep_scale(1) };
            (End::Token(term), opts.max_coarse_frames)
        } else {
            let r = ratio(spec, i);
            let expected = grids[i - 1].frames * r;
            if spec.num_streams[i] > 1 && !last {
                (End::Fixed(expected), expected)
            } else {
                let term = if last { vocab.eos() } else { vocab.sep_scale(i + 1) };
                (End::Token(term), expected + r)
            }
        };
        let (grid, _) = c.scale(i, &prompt.reference[i], end, cap)?;
        if let End::Fixed(_) = end {
            c.push_single(vocab.sep_scale(i + 1));
        }
        let grid = if i == 0 {
            grid
        } else {
            let r = ratio(spec, i);
            fit_length(grid, grids[i - 1].frames * r, r, i)?
        };
        grids.push(grid);
    }
    let source = grids[0].frames * spec.total_factor();
    Ok(MultiScaleTokens::new(grids, spec.clone(), source)?)
}

/// Stack-of-scale generation: `models[i]` produces scale `i`; every finer
/// model is conditioned on the final hidden states of the previous one at
/// the positions holding its frames.
pub fn generate_sos(
    models: &[LmModel],
    vocab: &Vocabulary,
    spec: &ScaleSpec,
    prompt: &IclPrompt,
    opts: &GenerateOptions,
) -> Result<MultiScaleTokens> {
    check_prompt(prompt, spec, vocab)?;
    let n = spec.num_scales();
    if models.len() != n {
        return Err(LmError::Config(format!("{} models for {n} scales", models.len())));
    }
    let mut grids: Vec<TokenGrid> = Vec::with_capacity(n);
    let mut h: Option<Tensor> = None;
    for (i, model) in models.iter().enumerate() {
        if model.config().streams != spec.num_streams[i] {
            return Err(LmError::Config(format!(
                "stage {i} model has {} streams, scale has {}",
                model.config().streams,
                spec.num_streams[i]
            )));
        }
        let mut c = Cursor {
            model,
            vocab,
            input: LmInput::default(),
            sampler: &opts.sampler,
            rng: ChaCha8Rng::seed_from_u64(opts.sampler.seed.wrapping_add(i as u64)),
        };
        let (grid, positions) = if i == 0 {
            c.input.g = Some(prompt.g.g.clone());
            c.push_single(vocab.bos());
            for &t in &prompt.text_ids {
                c.push_single(t);
            }
            c.push_single(vocab.sep_text());
            c.push_single(vocab.sep_scale(0));
            c.scale(0, &prompt.reference[0], End::Token(vocab.eos()), opts.max_coarse_frames)?
        } else {
            let prev = h.take().expect("set by the previous stage");
            let r = ratio(spec, i);
            let len = grids[i - 1].frames * r;
            let cond = if opts.zero_condition {
                Tensor::zeros(prev.shape().to_vec())
            } else {
                prev
            };
            c.input.cond = Some(cond);
            c.input.additive = Some(Additive {
                start: 0,
                len,
                factor: r,
            });
            c.push_single(vocab.sep_scale(i));
            if prompt.reference[i].frames > len {
                return Err(LmError::Alignment(format!(
                    "reference of {} frames exceeds stage {i} length {len}",
                    prompt.reference[i].frames
                )));
            }
            c.scale(i, &prompt.reference[i], End::Fixed(len), len)?
        };
        if i + 1 < n {
            let out = model.forward(&c.input)?;
            h = Some(out.hidden.select(&positions)?);
        }
        grids.push(grid);
    }
    let source = grids[0].frames * spec.total_factor();
    Ok(MultiScaleTokens::new(grids, spec.clone(), source)?)
}
