use crate::config::ScaleSpec;
use crate::{CodecError, Result};

/// Row-major `frames × streams` token indices of one scale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub frames: usize,
    pub streams: usize,
    pub data: Vec<u32>,
}

impl TokenGrid {
    pub fn new(frames: usize, streams: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != frames * streams {
            return Err(CodecError::Input(format!(
                "{} tokens for a {frames}×{streams} grid",
                data.len()
            )));
        }
        Ok(Self { frames, streams, data })
    }

    pub fn get(&self, t: usize, s: usize) -> u32 {
        self.data[t * self.streams + s]
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        &self.data[t * self.streams..(t + 1) * self.streams]
    }

    pub fn as_indices(&self) -> Vec<usize> {
        self.data.iter().map(|&v| v as usize).collect()
    }
}

/// Token grids for every scale (coarse→fine) plus the Mel length they encode.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleTokens {
    pub grids: Vec<TokenGrid>,
    pub spec: ScaleSpec,
    pub source_frames: usize,
}

impl MultiScaleTokens {
    pub fn new(grids: Vec<TokenGrid>, spec: ScaleSpec, source_frames: usize) -> Result<Self> {
        let t = Self {
            grids,
            spec,
            source_frames,
        };
        t.validate()?;
        Ok(t)
    }

    /// Grid shapes must follow from `source_frames` and indices must fit
    /// the codebooks.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.grids.len() != self.spec.num_scales() {
            return Err(CodecError::Input(format!(
                "{} grids for {} scales",
                self.grids.len(),
                self.spec.num_scales()
            )));
        }
        let lengths = self.spec.scale_lengths(self.source_frames);
        for (i, grid) in self.grids.iter().enumerate() {
            if grid.frames != lengths[i] || grid.streams != self.spec.num_streams[i] {
                return Err(CodecError::Input(format!(
                    "scale {i} grid is {}×{}, expected {}×{}",
                    grid.frames, grid.streams, lengths[i], self.spec.num_streams[i]
                )));
            }
            let k = self.spec.codebook_size[i] as u32;
            if let Some(bad) = grid.data.iter().find(|&&v| v >= k) {
                return Err(CodecError::Input(format!(
                    "token {bad} outside codebook of {k} at scale {i}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.grids.len()
    }
}
