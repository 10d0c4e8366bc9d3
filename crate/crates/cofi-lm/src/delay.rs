use cofi_codec::TokenGrid;

use crate::{LmError, Result};

/// Delay-pattern layout: stream `j` at step `t` holds frame `t − j`, or
/// `None` (PAD) outside `0..T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DelayGrid {
    pub steps: usize,
    pub streams: usize,
    pub source_len: usize,
    pub data: Vec<Option<u32>>,
}

impl DelayGrid {
    pub fn get(&self, step: usize, stream: usize) -> Option<u32> {
        self.data[step * self.streams + stream]
    }

    pub fn step(&self, step: usize) -> &[Option<u32>] {
        &self.data[step * self.streams..(step + 1) * self.streams]
    }
}

pub fn delay_encode(grid: &TokenGrid) -> Result<DelayGrid> {
    let (t_len, s) = (grid.frames, grid.streams);
    if s == 0 {
        return Err(LmError::Input("grid has no streams".into()));
    }
    let steps = t_len + s - 1;
    let mut data = vec![None; steps * s];
    for t in 0..t_len {
        for j in 0..s {
            data[(t + j) * s + j] = Some(grid.get(t, j));
        }
    }
    Ok(DelayGrid {
        steps,
        streams: s,
        source_len: t_len,
        data,
    })
}

pub fn delay_decode(d: &DelayGrid) -> Result<TokenGrid> {
    let s = d.streams;
    if s == 0 || d.data.len() != d.steps * s || d.steps + 1 < s || d.steps + 1 - s != d.source_len {
        return Err(LmError::Format(format!(
            "{} steps × {} streams cannot hold {} frames",
            d.steps, s, d.source_len
        )));
    }
    let t_len = d.source_len;
    let mut out = vec![0; t_len * s];
    for step in 0..d.steps {
        for j in 0..s {
            let inside = step >= j && step - j < t_len;
            match (d.get(step, j), inside) {
                (Some(v), true) => out[(step - j) * s + j] = v,
                (None, false) => {}
                (Some(_), false) => {
                    return Err(LmError::Format(format!(
                        "token outside the delay window at step {step}, stream {j}"
                    )))
                }
                (None, true) => {
                    return Err(LmError::Format(format!(
                        "PAD inside the grid at step {step}, stream {j}"
                    )))
                }
            }
        }
    }
    Ok(TokenGrid::new(t_len, s, out)?)
}
