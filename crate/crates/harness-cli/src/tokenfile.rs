//! `COFT1` token files: magic, a `key=value` header (scale spec, source
//! frames, global embedding), then each scale's grid as little-endian u32.

use std::collections::BTreeMap;
use std::path::Path;

use cofi_codec::{GlobalEmbedding, MultiScaleTokens, TokenGrid};

use crate::checkpoint::{join, parse_list, read_spec, write_header};
use crate::error::{HarnessError, Result};

pub const TOKEN_MAGIC: &[u8; 5] = b"COFT1";

fn fmt_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Format(msg.into())
}

pub fn tokens_to_bytes(t: &MultiScaleTokens, g: &GlobalEmbedding) -> Result<Vec<u8>> {
    t.validate()?;
    let s = &t.spec;
    let mut header = BTreeMap::new();
    header.insert("scales.frameshift_ms".to_string(), join(&s.frameshift_ms));
    header.insert("scales.num_streams".to_string(), join(&s.num_streams));
    header.insert("scales.codebook_size".to_string(), join(&s.codebook_size));
    header.insert("scales.latent_dim".to_string(), s.latent_dim.to_string());
    header.insert("source_frames".to_string(), t.source_frames.to_string());
    header.insert("g".to_string(), join(&g.g));
    let mut out = TOKEN_MAGIC.to_vec();
    write_header(&mut out, &header)?;
    for grid in &t.grids {
        for v in &grid.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn tokens_from_bytes(buf: &[u8]) -> Result<(MultiScaleTokens, GlobalEmbedding)> {
    if buf.len() < 9 || &buf[..5] != TOKEN_MAGIC {
        return Err(fmt_err("not a token file (bad magic)"));
    }
    let n = u32::from_le_bytes(buf[5..9].try_into().expect("4 bytes")) as usize;
    let body = buf.get(9..9 + n).ok_or_else(|| fmt_err("truncated token header"))?;
    let text = std::str::from_utf8(body).map_err(|_| fmt_err("token header is not UTF-8"))?;
    let mut header = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("header line {line:?}")))?;
        header.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| fmt_err(format!("token header lacks {k}")))
    };
    let spec = read_spec(get)?;
    let source_frames: usize = get("source_frames")?
        .parse()
        .map_err(|_| fmt_err("bad source_frames"))?;
    let g: Vec<f64> = parse_list(&get("g")?, "g")?;
    let lengths = spec.scale_lengths(source_frames);
    let mut pos = 9 + n;
    let mut grids = Vec::new();
    for (i, &len) in lengths.iter().enumerate() {
        let count = len * spec.num_streams[i];
        let bytes = buf
            .get(pos..pos + 4 * count)
            .ok_or_else(|| fmt_err(format!("truncated grid for scale {i}")))?;
        let data = bytes
            .chunks(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        grids.push(TokenGrid::new(len, spec.num_streams[i], data)?);
        pos += 4 * count;
    }
    if pos != buf.len() {
        return Err(fmt_err("trailing bytes after the last grid"));
    }
    Ok((
        MultiScaleTokens::new(grids, spec, source_frames)?,
        GlobalEmbedding { g },
    ))
}

pub fn save_tokens(path: &Path, t: &MultiScaleTokens, g: &GlobalEmbedding) -> Result<()> {
    std::fs::write(path, tokens_to_bytes(t, g)?).map_err(|e| HarnessError::io(path, e))
}

pub fn load_tokens(path: &Path) -> Result<(MultiScaleTokens, GlobalEmbedding)> {
    let buf = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    tokens_from_bytes(&buf)
}
