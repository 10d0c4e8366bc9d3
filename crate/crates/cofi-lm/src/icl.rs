use cofi_codec::{GlobalEmbedding, MultiScaleTokens, TokenGrid};

use crate::{LmError, Result};

/// Text and speech prompt for in-context generation. Reference tokens sit
/// before the generation cursor of every scale.
#[derive(Clone, Debug, PartialEq)]
pub struct IclPrompt {
    pub text_ids: Vec<u32>,
    /// One grid per scale, coarse→fine; frames 0 on a plain prompt.
    pub reference: Vec<TokenGrid>,
    pub g: GlobalEmbedding,
}

impl IclPrompt {
    /// Prompt without reference speech.
    pub fn plain(text_ids: Vec<u32>, streams: &[usize], g: GlobalEmbedding) -> Self {
        Self {
            text_ids,
            reference: streams
                .iter()
                .map(|&s| TokenGrid::new(0, s, Vec::new()).expect("empty grid"))
                .collect(),
            g,
        }
    }

    /// Where generated frames begin at each scale.
    pub fn cursors(&self) -> Vec<usize> {
        self.reference.iter().map(|g| g.frames).collect()
    }

    pub fn has_reference(&self) -> bool {
        self.reference.iter().any(|g| g.frames > 0)
    }
}

/// `ref_text ++ target_text` with the reference tokens as speech prompt.
/// `ref_tokens` of `None` gives a plain prompt over the given stream layout.
pub fn build_icl_prompt(
    ref_tokens: Option<&MultiScaleTokens>,
    streams: &[usize],
    ref_text: &[u32],
    target_text: &[u32],
    ref_g: GlobalEmbedding,
) -> Result<IclPrompt> {
    let mut text_ids = ref_text.to_vec();
    text_ids.extend_from_slice(target_text);
    let Some(t) = ref_tokens else {
        return Ok(IclPrompt::plain(text_ids, streams, ref_g));
    };
    if t.grids.len() != streams.len() {
        return Err(LmError::Input(format!(
            "reference covers {} scales, generation needs {}",
            t.grids.len(),
            streams.len()
        )));
    }
    for (i, (g, &s)) in t.grids.iter().zip(streams).enumerate() {
        if g.streams != s {
            return Err(LmError::Input(format!(
                "reference scale {i} has {} streams, expected {s}",
                g.streams
            )));
        }
    }
    Ok(IclPrompt {
        text_ids,
        reference: t.grids.clone(),
        g: ref_g,
    })
}
