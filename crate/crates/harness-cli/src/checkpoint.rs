//! `COFI1` checkpoints: magic, a UTF-8 `key=value` header, then named
//! little-endian `f64` arrays in name order.

use std::collections::BTreeMap;
use std::path::Path;

use cofi_codec::{Codec, CodecConfig, ScaleSpec};
use cofi_lm::{LmConfig, LmModel, Vocabulary};
use quantizers::{Codebook, QuantMode, Quantizer};
use sha2::{Digest, Sha256};
use tensor_core::{ParamStore, Tensor};

use crate::error::{HarnessError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"COFI1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `codec`, `lm-cos` or `lm-sos-stage-<i>`.
    pub kind: String,
    pub header: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor>,
}

fn fmt_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| fmt_err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(fmt_err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn write_header(out: &mut Vec<u8>, header: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::new();
    for (k, v) in header {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(fmt_err(format!("header entry {k:?} cannot be stored")));
        }
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(())
}

fn read_header(r: &mut Reader<'_>) -> Result<BTreeMap<String, String>> {
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| fmt_err("header is not UTF-8"))?;
    let mut header = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("header line {line:?}")))?;
        if header.insert(k.to_string(), v.to_string()).is_some() {
            return Err(fmt_err(format!("duplicate header key {k}")));
        }
    }
    Ok(header)
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            header: BTreeMap::new(),
            arrays: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| fmt_err(format!("checkpoint header lacks {key}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| fmt_err(format!("bad value for {key}: {:?}", self.get(key).unwrap_or(""))))
    }

    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(self.get(key)?, key)
    }

    pub fn array(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .get(name)
            .ok_or_else(|| fmt_err(format!("checkpoint lacks array {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        let mut header = self.header.clone();
        header.insert("kind".into(), self.kind.clone());
        write_header(&mut out, &header)?;
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(5)? != CHECKPOINT_MAGIC {
            return Err(fmt_err("not a checkpoint (bad magic)"));
        }
        let mut header = read_header(&mut r)?;
        let kind = header.remove("kind").ok_or_else(|| fmt_err("checkpoint has no kind"))?;
        let n = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fmt_err("array name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            if count.saturating_mul(8) > buf.len() {
                return Err(fmt_err(format!("array {name} larger than the file")));
            }
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data)?;
            if arrays.insert(name.clone(), t).is_some() {
                return Err(fmt_err(format!("array {name} stored twice")));
            }
        }
        r.done()?;
        Ok(Self { kind, header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

pub(crate) fn parse_list<T: std::str::FromStr>(s: &str, key: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| fmt_err(format!("bad list entry {x:?} for {key}")))
        })
        .collect()
}

pub(crate) fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn put_spec(c: &mut Checkpoint, s: &ScaleSpec) {
    c.set("scales.frameshift_ms", join(&s.frameshift_ms));
    c.set("scales.num_streams", join(&s.num_streams));
    c.set("scales.codebook_size", join(&s.codebook_size));
    c.set("scales.latent_dim", s.latent_dim);
}

pub(crate) fn read_spec(get: impl Fn(&str) -> Result<String>) -> Result<ScaleSpec> {
    let spec = ScaleSpec {
        frameshift_ms: parse_list(&get("scales.frameshift_ms")?, "scales.frameshift_ms")?,
        num_streams: parse_list(&get("scales.num_streams")?, "scales.num_streams")?,
        codebook_size: parse_list(&get("scales.codebook_size")?, "scales.codebook_size")?,
        latent_dim: get("scales.latent_dim")?
            .parse()
            .map_err(|_| fmt_err("bad scales.latent_dim"))?,
    };
    spec.validate()?;
    Ok(spec)
}

fn codebook_arrays(c: &mut Checkpoint, prefix: &str, cb: &Codebook) -> Result<()> {
    let (k, d) = (cb.size(), cb.dim());
    c.arrays.insert(
        format!("{prefix}.codewords"),
        Tensor::new(vec![k, d], cb.codewords().to_vec())?,
    );
    c.arrays.insert(
        format!("{prefix}.counts"),
        Tensor::new(vec![k], cb.ema_counts().to_vec())?,
    );
    c.arrays.insert(
        format!("{prefix}.sums"),
        Tensor::new(vec![k, d], cb.ema_sums().to_vec())?,
    );
    c.set(&format!("{prefix}.initialized"), cb.is_initialized());
    c.set(&format!("{prefix}.decay"), cb.decay());
    Ok(())
}

pub fn codec_to_checkpoint(codec: &Codec) -> Result<Checkpoint> {
    let cfg = codec.config();
    let mut c = Checkpoint::new("codec");
    put_spec(&mut c, &cfg.scales);
    c.set(
        "codec.quant_modes",
        cfg.quant_modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
    );
    c.set("codec.res_units", cfg.res_units);
    c.set("codec.extra_fine_units", cfg.extra_fine_units);
    c.set("codec.kernel", cfg.kernel);
    c.set("codec.ref_kernel", cfg.ref_kernel);
    c.set("codec.ema_decay", cfg.ema_decay);
    c.set("codec.lambda_vq", cfg.lambda_vq);
    c.set("codec.lambda_reg", cfg.lambda_reg);
    c.set("codec.lambda_adv", cfg.lambda_adv);
    for (name, t) in codec.params().iter() {
        c.arrays.insert(format!("param.{name}"), t.clone());
    }
    let (mean, std) = codec.normalization();
    c.arrays
        .insert("norm.mean".into(), Tensor::new(vec![mean.len()], mean.to_vec())?);
    c.set("norm.std", std);
    for (i, q) in codec.quantizers().iter().enumerate() {
        let drop = q.drop_probs();
        c.arrays
            .insert(format!("quant.{i}.drop"), Tensor::new(vec![drop.len()], drop.to_vec())?);
        for (s, cb) in q.codebooks().iter().enumerate() {
            codebook_arrays(&mut c, &format!("quant.{i}.{s}"), cb)?;
        }
    }
    Ok(c)
}

pub fn codec_from_checkpoint(c: &Checkpoint) -> Result<Codec> {
    if c.kind != "codec" {
        return Err(fmt_err(format!("expected a codec checkpoint, found {}", c.kind)));
    }
    let scales = read_spec(|k| c.get(k).map(str::to_string))?;
    let modes = c
        .get("codec.quant_modes")?
        .split(',')
        .map(|m| QuantMode::parse(m).map_err(HarnessError::from))
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = CodecConfig::with_scales(scales, c.parse("codec.res_units")?, c.parse("codec.extra_fine_units")?);
    cfg.quant_modes = modes;
    cfg.kernel = c.parse("codec.kernel")?;
    cfg.ref_kernel = c.parse("codec.ref_kernel")?;
    cfg.ema_decay = c.parse("codec.ema_decay")?;
    cfg.lambda_vq = c.parse("codec.lambda_vq")?;
    cfg.lambda_reg = c.parse("codec.lambda_reg")?;
    cfg.lambda_adv = c.parse("codec.lambda_adv")?;
    cfg.validate()?;
    let mut params = ParamStore::new();
    for (name, t) in &c.arrays {
        if let Some(p) = name.strip_prefix("param.") {
            params.insert(p, t.clone());
        }
    }
    let mut quants = Vec::new();
    for i in 0..cfg.scales.num_scales() {
        let qc = cfg.quantizer_config(i);
        let mut cbs = Vec::new();
        for s in 0..qc.num_streams {
            let p = format!("quant.{i}.{s}");
            let cw = c.array(&format!("{p}.codewords"))?;
            if cw.shape().len() != 2 {
                return Err(fmt_err(format!("{p}.codewords is not a matrix")));
            }
            cbs.push(Codebook::from_state(
                cw.rows(),
                cw.cols(),
                cw.data().to_vec(),
                c.array(&format!("{p}.counts"))?.data().to_vec(),
                c.array(&format!("{p}.sums"))?.data().to_vec(),
                c.parse(&format!("{p}.decay"))?,
                c.parse(&format!("{p}.initialized"))?,
            )?);
        }
        let q = Quantizer::from_codebooks(qc, cbs)?
            .with_drop_probs(c.array(&format!("quant.{i}.drop"))?.data().to_vec())?;
        quants.push(q);
    }
    let mean = c.array("norm.mean")?.data().to_vec();
    Ok(Codec::from_parts(cfg, params, quants, mean, c.parse("norm.std")?)?)
}

/// SHA-256 of the vocabulary's text form.
pub fn vocab_hash(v: &Vocabulary) -> String {
    hex::encode(Sha256::digest(v.to_text().as_bytes()))
}

pub fn lm_to_checkpoint(kind: &str, model: &LmModel, vocab: &Vocabulary) -> Result<Checkpoint> {
    let cfg = model.config();
    let mut c = Checkpoint::new(kind);
    c.set("lm.vocab_size", cfg.vocab_size);
    c.set("lm.dim", cfg.dim);
    c.set("lm.layers", cfg.layers);
    c.set("lm.heads", cfg.heads);
    c.set("lm.max_len", cfg.max_len);
    c.set("lm.streams", cfg.streams);
    c.set("lm.g_dim", cfg.g_dim);
    c.set("lm.cond_dim", cfg.cond_dim);
    c.set("vocab.codebook_sizes", join(vocab.codebook_sizes()));
    c.set("vocab.sha256", vocab_hash(vocab));
    let merges = vocab.merges();
    let flat: Vec<f64> = merges.iter().flat_map(|&(a, b)| [a as f64, b as f64]).collect();
    c.arrays
        .insert("vocab.merges".into(), Tensor::new(vec![merges.len(), 2], flat)?);
    for (name, t) in model.params().iter() {
        c.arrays.insert(format!("param.{name}"), t.clone());
    }
    Ok(c)
}

pub fn lm_from_checkpoint(c: &Checkpoint) -> Result<(LmModel, Vocabulary)> {
    if !c.kind.starts_with("lm-") {
        return Err(fmt_err(format!(
            "expected a language-model checkpoint, found {}",
            c.kind
        )));
    }
    let m = c.array("vocab.merges")?;
    let merges = m
        .data()
        .chunks(2)
        .map(|p| (p[0] as u32, p[1] as u32))
        .collect::<Vec<_>>();
    let vocab = Vocabulary::new(merges, c.parse_list("vocab.codebook_sizes")?)?;
    if vocab_hash(&vocab) != c.get("vocab.sha256")? {
        return Err(fmt_err("vocabulary does not match its recorded hash"));
    }
    let cfg = LmConfig {
        vocab_size: c.parse("lm.vocab_size")?,
        dim: c.parse("lm.dim")?,
        layers: c.parse("lm.layers")?,
        heads: c.parse("lm.heads")?,
        max_len: c.parse("lm.max_len")?,
        streams: c.parse("lm.streams")?,
        g_dim: c.parse("lm.g_dim")?,
        cond_dim: c.parse("lm.cond_dim")?,
    };
    if cfg.vocab_size != vocab.size() {
        return Err(fmt_err("model vocabulary size differs from the stored vocabulary"));
    }
    let mut params = ParamStore::new();
    for (name, t) in &c.arrays {
        if let Some(p) = name.strip_prefix("param.") {
            params.insert(p, t.clone());
        }
    }
    Ok((LmModel::from_parts(cfg, params)?, vocab))
}
