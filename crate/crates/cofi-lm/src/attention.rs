use tensor_core::{AttnMap, Tensor};

use crate::{LmError, Result};

pub const ATTN_SCALE: f64 = 0.25;
pub const ATTN_CLIP: f64 = 1.0;

/// Sum over every layer and head, scaled by 0.25 and clipped at 1.
pub fn attention_aggregate(maps: &[Vec<AttnMap>]) -> Result<Tensor> {
    let mut it = maps.iter().flatten();
    let first = it
        .next()
        .ok_or_else(|| LmError::Input("no attention maps to aggregate".into()))?;
    let shape = first.probs.shape().to_vec();
    let mut acc = first.probs.data().to_vec();
    for m in it {
        if m.probs.shape() != shape.as_slice() {
            return Err(LmError::Input(format!(
                "attention map {:?} does not match {:?}",
                m.probs.shape(),
                shape
            )));
        }
        for (a, v) in acc.iter_mut().zip(m.probs.data()) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a = (*a * ATTN_SCALE).min(ATTN_CLIP);
    }
    Ok(Tensor::new(shape, acc)?)
}
