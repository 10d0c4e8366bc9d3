use rand::Rng;
use tensor_core::{AttnMap, Bound, Graph, ParamStore, Tensor, Var};

use crate::{LmError, Result};

/// Decoder-only transformer shape. `streams` parallel embedding tables and
/// output heads serve packed multi-stream positions; `g_dim`/`cond_dim`
/// of zero disable the corresponding prefix inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub streams: usize,
    pub g_dim: usize,
    pub cond_dim: usize,
}

impl LmConfig {
    /// 4 layers, 4 heads, width 256.
    pub fn desk(vocab_size: usize, streams: usize, g_dim: usize, cond_dim: usize) -> Self {
        Self {
            vocab_size,
            dim: 256,
            layers: 4,
            heads: 4,
            max_len: 2048,
            streams,
            g_dim,
            cond_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.layers == 0 || self.streams == 0 || self.max_len == 0 {
            return Err(LmError::Config(format!("degenerate model shape {self:?}")));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(LmError::Config(format!(
                "width {} not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Repeat-upsampled conditioning added to `len` token positions from `start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Additive {
    pub start: usize,
    pub len: usize,
    pub factor: usize,
}

/// One sequence: optional global embedding prefix, optional hidden-state
/// prefix (with its additive path), then packed token positions holding
/// one id per stream.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LmInput {
    pub g: Option<Vec<f64>>,
    pub cond: Option<Tensor>,
    pub additive: Option<Additive>,
    pub tokens: Vec<Vec<u32>>,
}

impl LmInput {
    pub fn prefix_len(&self) -> usize {
        usize::from(self.g.is_some()) + self.cond.as_ref().map_or(0, Tensor::rows)
    }

    pub fn len(&self) -> usize {
        self.prefix_len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Last-layer states (after the final layer norm), one row per token position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub states: Tensor,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, positions: &[usize]) -> Result<Tensor> {
        let d = self.states.cols();
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            if p >= self.len() {
                return Err(LmError::Alignment(format!("position {p} beyond {} states", self.len())));
            }
            data.extend_from_slice(self.states.row(p));
        }
        Ok(Tensor::new(vec![positions.len(), d], data)?)
    }
}

#[derive(Clone, Debug)]
pub struct LmOutput {
    /// Per head, `tokens × vocab`.
    pub logits: Vec<Tensor>,
    pub hidden: HiddenStates,
    /// `attn[layer][head]` over all positions, prefix included.
    pub attn: Vec<Vec<AttnMap>>,
}

pub(crate) struct GraphOutput {
    pub logits: Vec<Var>,
    pub hidden: Var,
    pub attn: Vec<Vec<AttnMap>>,
}

#[derive(Clone, Debug)]
pub struct LmModel {
    config: LmConfig,
    params: ParamStore,
}

impl LmModel {
    pub fn new<R: Rng + ?Sized>(config: LmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.dim);
        let mut p = ParamStore::new();
        for j in 0..config.streams {
            p.insert(format!("tok.{j}"), Tensor::uniform(vec![v, d], 0.1, rng));
            init_linear(&mut p, &format!("head.{j}"), d, v, rng);
        }
        p.insert("pos", Tensor::uniform(vec![config.max_len, d], 0.1, rng));
        if config.g_dim > 0 {
            init_linear(&mut p, "g.proj", config.g_dim, d, rng);
        }
        if config.cond_dim > 0 {
            init_linear(&mut p, "cond.proj", config.cond_dim, d, rng);
        }
        for l in 0..config.layers {
            for ln in ["ln1", "ln2"] {
                p.init_ones(format!("l{l}.{ln}.g"), vec![d]);
                p.init_zeros(format!("l{l}.{ln}.b"), vec![d]);
            }
            for m in ["q", "k", "v", "o"] {
                init_linear(&mut p, &format!("l{l}.attn.{m}"), d, d, rng);
            }
            init_linear(&mut p, &format!("l{l}.mlp.fc1"), d, 4 * d, rng);
            init_linear(&mut p, &format!("l{l}.mlp.fc2"), 4 * d, d, rng);
        }
        p.init_ones("ln_f.g", vec![d]);
        p.init_zeros("ln_f.b", vec![d]);
        Ok(Self { config, params: p })
    }

    pub fn from_parts(config: LmConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let reference = Self::new(config.clone(), &mut rng)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(LmError::Format(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(LmError::Format(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(LmError::Format("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, input: &LmInput) -> Result<LmOutput> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let out = self.forward_graph(&mut g, &b, input)?;
        Ok(LmOutput {
            logits: out.logits.iter().map(|&v| g.value(v).clone()).collect(),
            hidden: HiddenStates {
                states: g.value(out.hidden).clone(),
            },
            attn: out.attn,
        })
    }

    pub(crate) fn forward_graph(&self, g: &mut Graph, b: &Bound, input: &LmInput) -> Result<GraphOutput> {
        let c = &self.config;
        let len = input.len();
        if len > c.max_len {
            return Err(LmError::Capacity { len, max: c.max_len });
        }
        if input.tokens.is_empty() {
            return Err(LmError::Input("no token positions".into()));
        }
        let mut parts = Vec::new();
        if let Some(gv) = &input.g {
            if c.g_dim == 0 || gv.len() != c.g_dim {
                return Err(LmError::Input(format!(
                    "global embedding of {} for g_dim {}",
                    gv.len(),
                    c.g_dim
                )));
            }
            let x = g.constant(Tensor::new(vec![1, gv.len()], gv.clone())?);
            parts.push(g.linear(x, b.get("g.proj.w")?, Some(b.get("g.proj.b")?))?);
        }
        let mut cond_proj = None;
        if let Some(h) = &input.cond {
            if c.cond_dim == 0 || h.cols() != c.cond_dim {
                return Err(LmError::Input(format!(
                    "conditioning width {} for cond_dim {}",
                    h.cols(),
                    c.cond_dim
                )));
            }
            let x = g.constant(h.clone());
            let p = g.linear(x, b.get("cond.proj.w")?, Some(b.get("cond.proj.b")?))?;
            parts.push(p);
            cond_proj = Some(p);
        }

        let n = input.tokens.len();
        let mut emb = None;
        for j in 0..c.streams {
            let mut ids = Vec::with_capacity(n);
            for pos in &input.tokens {
                if pos.len() != c.streams {
                    return Err(LmError::Input(format!(
                        "position with {} ids for {} streams",
                        pos.len(),
                        c.streams
                    )));
                }
                ids.push(pos[j] as usize);
            }
            let e = g.embedding(b.get(&format!("tok.{j}"))?, &ids)?;
            emb = Some(match emb {
                None => e,
                Some(acc) => g.add(acc, e)?,
            });
        }
        let mut emb = emb.expect("at least one stream");
        if let Some(a) = input.additive {
            let p = cond_proj.ok_or_else(|| LmError::Input("additive conditioning without hidden states".into()))?;
            let rows = g.value(p).rows();
            if rows * a.factor != a.len || a.start >= n {
                return Err(LmError::Alignment(format!(
                    "{rows} states × {} onto {} positions from {} of {n}",
                    a.factor, a.len, a.start
                )));
            }
            // a partially generated sequence receives only its leading rows
            let len = a.len.min(n - a.start);
            let mut up = g.repeat_rows(p, a.factor)?;
            if len < a.len {
                up = g.slice_rows(up, 0, len)?;
            }
            let mut pieces = Vec::new();
            if a.start > 0 {
                pieces.push(g.slice_rows(emb, 0, a.start)?);
            }
            let mid = g.slice_rows(emb, a.start, len)?;
            pieces.push(g.add(mid, up)?);
            if a.start + len < n {
                pieces.push(g.slice_rows(emb, a.start + len, n - a.start - len)?);
            }
            emb = g.concat_rows(&pieces)?;
        }
        parts.push(emb);
        let x = g.concat_rows(&parts)?;
        let pos = g.slice_rows(b.get("pos")?, 0, len)?;
        let mut x = g.add(x, pos)?;

        let mut attn = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let h = g.layer_norm(x, b.get(&format!("l{l}.ln1.g"))?, b.get(&format!("l{l}.ln1.b"))?)?;
            let (a, maps) = self.self_attention(g, b, l, h)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, b.get(&format!("l{l}.ln2.g"))?, b.get(&format!("l{l}.ln2.b"))?)?;
            let h = lin(g, b, &format!("l{l}.mlp.fc1"), h)?;
            let h = g.gelu(h)?;
            let h = lin(g, b, &format!("l{l}.mlp.fc2"), h)?;
            x = g.add(x, h)?;
            attn.push(maps);
        }
        let x = g.layer_norm(x, b.get("ln_f.g")?, b.get("ln_f.b")?)?;
        let prefix = input.prefix_len();
        let hidden = g.slice_rows(x, prefix, n)?;
        let logits = (0..c.streams)
            .map(|j| lin(g, b, &format!("head.{j}"), hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphOutput { logits, hidden, attn })
    }

    fn self_attention(&self, g: &mut Graph, b: &Bound, l: usize, x: Var) -> Result<(Var, Vec<AttnMap>)> {
        let c = &self.config;
        let hd = c.dim / c.heads;
        let q = lin(g, b, &format!("l{l}.attn.q"), x)?;
        let k = lin(g, b, &format!("l{l}.attn.k"), x)?;
        let v = lin(g, b, &format!("l{l}.attn.v"), x)?;
        let mut outs = Vec::with_capacity(c.heads);
        let mut maps = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let (o, m) = g.attention(qh, kh, vh, true)?;
            outs.push(o);
            maps.push(m);
        }
        let cat = g.concat_cols(&outs)?;
        Ok((lin(g, b, &format!("l{l}.attn.o"), cat)?, maps))
    }
}

fn init_linear<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) {
    p.init_uniform(format!("{name}.w"), vec![d_in, d_out], d_in, rng);
    p.init_zeros(format!("{name}.b"), vec![d_out]);
}

fn lin(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    Ok(g.linear(x, b.get(&format!("{name}.w"))?, Some(b.get(&format!("{name}.b"))?))?)
}
