use cofi_codec::MultiScaleTokens;
use tensor_core::Tensor;

use crate::delay::delay_encode;
use crate::model::{Additive, LmInput};
use crate::vocab::Vocabulary;
use crate::{LmError, Result};

/// One id per position with its loss mask, as a single flat chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatSequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// `[BOS, text, SEP_text, SEP_0, s^0, SEP_1, s^1, …, EOS]` with scales
/// coarse→fine; multi-stream scales are delay-encoded and flattened
/// step-major (all streams of step 0, then step 1, …), PAD filling the
/// delay gaps. The loss covers speech tokens, the separators that end a
/// scale, and EOS.
pub fn cos_build_sequence(vocab: &Vocabulary, text_ids: &[u32], tokens: &MultiScaleTokens) -> Result<FlatSequence> {
    check_scales(vocab, tokens)?;
    let mut ids = vec![vocab.bos()];
    ids.extend_from_slice(text_ids);
    ids.push(vocab.sep_text());
    let mut mask = vec![false; ids.len()];
    for (i, grid) in tokens.grids.iter().enumerate() {
        ids.push(vocab.sep_scale(i));
        mask.push(i > 0);
        if grid.streams == 1 {
            for &c in &grid.data {
                ids.push(vocab.speech_id(i, c));
                mask.push(true);
            }
        } else {
            let d = delay_encode(grid)?;
            for v in &d.data {
                match v {
                    Some(c) => {
                        ids.push(vocab.speech_id(i, *c));
                        mask.push(true);
                    }
                    None => {
                        ids.push(vocab.pad());
                        mask.push(false);
                    }
                }
            }
        }
    }
    ids.push(vocab.eos());
    mask.push(true);
    Ok(FlatSequence { ids, loss_mask: mask })
}

fn check_scales(vocab: &Vocabulary, tokens: &MultiScaleTokens) -> Result<()> {
    if tokens.grids.len() != vocab.num_scales() {
        return Err(LmError::Input(format!(
            "{} token scales for a {}-scale vocabulary",
            tokens.grids.len(),
            vocab.num_scales()
        )));
    }
    for (i, g) in tokens.grids.iter().enumerate() {
        if g.data.iter().any(|&c| c as usize >= vocab.codebook_sizes()[i]) {
            return Err(LmError::Input(format!("scale {i} token outside its codebook")));
        }
    }
    Ok(())
}

/// Model-ready training example: packed positions, per-head next-token
/// targets, and the positions whose hidden states condition a finer stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LmExample {
    pub input: LmInput,
    /// `targets[p][j]`: what head `j` must predict at position `p`.
    pub targets: Vec<Vec<Option<u32>>>,
    /// Token positions holding this example's speech frames as inputs.
    pub frame_positions: Vec<usize>,
}

/// Accumulates packed positions. Every position carries one id per model
/// stream; single-token positions fill the extra streams with PAD.
pub(crate) struct Packer {
    streams: usize,
    pad: u32,
    pub tokens: Vec<Vec<u32>>,
    trained: Vec<Vec<bool>>,
}

impl Packer {
    pub fn new(streams: usize, pad: u32) -> Self {
        Self {
            streams,
            pad,
            tokens: Vec::new(),
            trained: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn single(&mut self, id: u32, trained: bool) {
        let mut t = vec![self.pad; self.streams];
        t[0] = id;
        let mut m = vec![false; self.streams];
        m[0] = trained;
        self.tokens.push(t);
        self.trained.push(m);
    }

    pub fn step(&mut self, ids: &[Option<u32>]) {
        let mut t = vec![self.pad; self.streams];
        let mut m = vec![false; self.streams];
        for (j, v) in ids.iter().enumerate() {
            if let Some(v) = v {
                t[j] = *v;
                m[j] = true;
            }
        }
        self.tokens.push(t);
        self.trained.push(m);
    }

    /// Next-position targets.
    pub fn targets(&self) -> Vec<Vec<Option<u32>>> {
        (0..self.tokens.len())
            .map(|p| match self.tokens.get(p + 1) {
                Some(next) => (0..self.streams)
                    .map(|j| self.trained[p + 1][j].then_some(next[j]))
                    .collect(),
                None => vec![None; self.streams],
            })
            .collect()
    }
}

/// Pushes one scale's tokens; a multi-stream scale is delay-encoded, and
/// with `eos` the end marker rides on stream 0 at step `T`.
pub(crate) fn push_scale(
    p: &mut Packer,
    vocab: &Vocabulary,
    scale: usize,
    grid: &cofi_codec::TokenGrid,
    eos: bool,
) -> Result<Vec<usize>> {
    let mut frames = Vec::with_capacity(grid.frames);
    if grid.streams == 1 {
        for &c in &grid.data {
            frames.push(p.len());
            p.single(vocab.speech_id(scale, c), true);
        }
        if eos {
            p.single(vocab.eos(), true);
        }
    } else {
        let d = delay_encode(grid)?;
        let steps = if eos { d.steps.max(grid.frames + 1) } else { d.steps };
        for step in 0..steps {
            if step < grid.frames {
                frames.push(p.len());
            }
            let mut ids: Vec<Option<u32>> = (0..grid.streams)
                .map(|j| {
                    if step < d.steps {
                        d.get(step, j).map(|c| vocab.speech_id(scale, c))
                    } else {
                        None
                    }
                })
                .collect();
            if eos && step == grid.frames {
                ids[0] = Some(vocab.eos());
            }
            p.step(&ids);
        }
    }
    Ok(frames)
}

fn model_streams(tokens: &MultiScaleTokens) -> usize {
    tokens.grids.iter().map(|g| g.streams).max().unwrap_or(1)
}

/// Chain-of-scale training example, with `g` as a prefix position.
pub fn cos_example(vocab: &Vocabulary, text_ids: &[u32], tokens: &MultiScaleTokens, g: &[f64]) -> Result<LmExample> {
    check_scales(vocab, tokens)?;
    let mut p = Packer::new(model_streams(tokens), vocab.pad());
    p.single(vocab.bos(), false);
    for &t in text_ids {
        p.single(t, false);
    }
    p.single(vocab.sep_text(), false);
    let n = tokens.grids.len();
    let mut frames = Vec::new();
    for (i, grid) in tokens.grids.iter().enumerate() {
        p.single(vocab.sep_scale(i), i > 0);
        frames = push_scale(&mut p, vocab, i, grid, i == n - 1)?;
    }
    Ok(LmExample {
        targets: p.targets(),
        input: LmInput {
            g: Some(g.to_vec()),
            cond: None,
            additive: None,
            tokens: p.tokens,
        },
        frame_positions: frames,
    })
}

/// Stack-of-scale example for `stage` (0 = coarsest). The coarsest stage
/// sees `g`, the text and its own tokens ending in EOS; finer stages see
/// the previous stage's hidden states `h` as prefix and additive
/// conditioning, and have their length fixed by it.
pub fn sos_example(
    vocab: &Vocabulary,
    stage: usize,
    text_ids: &[u32],
    tokens: &MultiScaleTokens,
    g: &[f64],
    h: Option<&Tensor>,
) -> Result<LmExample> {
    check_scales(vocab, tokens)?;
    let grid = &tokens.grids[stage];
    let mut p = Packer::new(grid.streams, vocab.pad());
    if stage == 0 {
        p.single(vocab.bos(), false);
        for &t in text_ids {
            p.single(t, false);
        }
        p.single(vocab.sep_text(), false);
        p.single(vocab.sep_scale(0), false);
        let frames = push_scale(&mut p, vocab, 0, grid, true)?;
        return Ok(LmExample {
            targets: p.targets(),
            input: LmInput {
                g: Some(g.to_vec()),
                cond: None,
                additive: None,
                tokens: p.tokens,
            },
            frame_positions: frames,
        });
    }
    let h = h.ok_or_else(|| LmError::Config(format!("stage {stage} needs conditioning hidden states")))?;
    let factor = stage_factor(tokens, stage)?;
    let cond = sos_condition(h, grid.frames, factor)?;
    p.single(vocab.sep_scale(stage), false);
    let frames = push_scale(&mut p, vocab, stage, grid, false)?;
    Ok(LmExample {
        targets: p.targets(),
        input: LmInput {
            g: None,
            cond: Some(cond.prefix),
            additive: Some(Additive {
                start: 0,
                len: grid.frames,
                factor,
            }),
            tokens: p.tokens,
        },
        frame_positions: frames,
    })
}

pub(crate) fn stage_factor(tokens: &MultiScaleTokens, stage: usize) -> Result<usize> {
    let shifts = &tokens.spec.frameshift_ms;
    if stage == 0 || stage >= shifts.len() {
        return Err(LmError::Input(format!("stage {stage} has no coarser neighbour")));
    }
    Ok(shifts[stage - 1] / shifts[stage])
}

/// Conditioning derived from coarse hidden states: the prefix rows and
/// their nearest-neighbour upsampling to the fine length.
#[derive(Clone, Debug, PartialEq)]
pub struct SosCondition {
    pub prefix: Tensor,
    pub additive: Tensor,
}

pub fn sos_condition(h: &Tensor, fine_len: usize, up_factor: usize) -> Result<SosCondition> {
    if h.shape().len() != 2 || up_factor == 0 {
        return Err(LmError::Alignment(format!(
            "bad hidden states {:?} / factor {up_factor}",
            h.shape()
        )));
    }
    if h.rows() * up_factor != fine_len {
        return Err(LmError::Alignment(format!(
            "{} coarse states × {up_factor} != fine length {fine_len}",
            h.rows()
        )));
    }
    let d = h.cols();
    let mut data = Vec::with_capacity(fine_len * d);
    for t in 0..h.rows() {
        for _ in 0..up_factor {
            data.extend_from_slice(h.row(t));
        }
    }
    Ok(SosCondition {
        prefix: h.clone(),
        additive: Tensor::new(vec![fine_len, d], data)?,
    })
}
