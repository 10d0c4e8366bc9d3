use dsp_frontend::{MelSpectrogram, N_MELS};
use rand::RngCore;
use tensor_core::{AdamW, AdamWConfig, Bound, ExpDecay, Graph, Tensor, Var};

use crate::config::{swnd_sample, SwndConfig};
use crate::model::{Codec, GraphPass, QuantPath};
use crate::tokens::{MultiScaleTokens, TokenGrid};
use crate::Result;

/// Loss terms of one codec evaluation. The adversarial term is kept for
/// structural completeness and is always zero here.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecLoss {
    pub l_vq: f64,
    pub l_reg: f64,
    pub l_adv: f64,
    pub total: f64,
    pub lambda_vq: f64,
    pub lambda_reg: f64,
    pub lambda_adv: f64,
}

impl CodecLoss {
    pub fn recomputed_total(&self) -> f64 {
        self.lambda_vq * self.l_vq + self.lambda_reg * self.l_reg + self.lambda_adv * self.l_adv
    }
}

struct LossVars {
    pass: GraphPass,
    l_vq: Var,
    l_reg: Var,
    total: Var,
}

impl Codec {
    fn loss_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        m: &MelSpectrogram,
        path: QuantPath<'_>,
        masked_finest: usize,
    ) -> Result<LossVars> {
        let pass = self.forward_graph(g, b, m, path, masked_finest)?;
        self.finish_loss(g, pass, m)
    }

    fn finish_loss(&self, g: &mut Graph, pass: GraphPass, m: &MelSpectrogram) -> Result<LossVars> {
        let recon = g.slice_rows(pass.recon, 0, m.n_frames())?;
        let target = g.constant(Tensor::new(vec![m.n_frames(), N_MELS], m.as_flat().to_vec())?);
        let l_reg = g.mse(recon, target)?;
        let present: Vec<Var> = pass.vq_losses.iter().flatten().copied().collect();
        let l_vq = if present.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let mut acc = present[0];
            for &v in &present[1..] {
                acc = g.add(acc, v)?;
            }
            g.scale(acc, 1.0 / present.len() as f64)?
        };
        let cfg = self.config();
        let wv = g.scale(l_vq, cfg.lambda_vq)?;
        let wr = g.scale(l_reg, cfg.lambda_reg)?;
        let total = g.add(wv, wr)?;
        Ok(LossVars {
            pass,
            l_vq,
            l_reg,
            total,
        })
    }

    fn loss_values(&self, g: &Graph, v: &LossVars) -> CodecLoss {
        let cfg = self.config();
        let l_adv = 0.0;
        CodecLoss {
            l_vq: g.value(v.l_vq).item(),
            l_reg: g.value(v.l_reg).item(),
            l_adv,
            total: g.value(v.total).item() + cfg.lambda_adv * l_adv,
            lambda_vq: cfg.lambda_vq,
            lambda_reg: cfg.lambda_reg,
            lambda_adv: cfg.lambda_adv,
        }
    }

    /// Full codec pass with loss. `masked_finest` is the SWND index `b`;
    /// with an rng, ordered-PQ streams are dropped as in training.
    pub fn codec_forward(
        &self,
        m: &MelSpectrogram,
        masked_finest: usize,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(MelSpectrogram, MultiScaleTokens, CodecLoss)> {
        let mut g = Graph::new();
        let b = self.params().bind(&mut g, false);
        let path = match rng {
            Some(r) => QuantPath::Train(r),
            None => QuantPath::Nearest,
        };
        let vars = self.loss_graph(&mut g, &b, m, path, masked_finest)?;
        let loss = self.loss_values(&g, &vars);
        let recon = g.value(vars.pass.recon).data()[..m.n_frames() * N_MELS].to_vec();
        let grids = vars
            .pass
            .quant
            .iter()
            .map(|r| {
                let r = r.as_ref().expect("quantized path");
                TokenGrid::new(r.frames(), r.num_streams, r.indices.iter().map(|&i| i as u32).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = MultiScaleTokens::new(grids, self.config().scales.clone(), m.n_frames())?;
        Ok((MelSpectrogram::from_flat(recon)?, tokens, loss))
    }

    /// Gradients of the training loss with respect to the encodings,
    /// coarse→fine, for a fixed SWND index. Used to check that masked scales
    /// receive no gradient.
    pub fn encoding_gradients(&self, m: &MelSpectrogram, masked_finest: usize) -> Result<Vec<Tensor>> {
        let encodings = self.encode_scales(m)?;
        let emb = self.reference_embed(m)?;
        let mut g = Graph::new();
        let b = self.params().bind(&mut g, false);
        let leaves: Vec<Var> = encodings.into_iter().map(|e| g.leaf(e.with_grad(true))).collect();
        let gv = g.constant(Tensor::new(vec![1, emb.g.len()], emb.g)?);
        let pass = self.decoder_graph(
            &mut g,
            &b,
            leaves.clone(),
            gv,
            m.n_frames(),
            &mut QuantPath::Nearest,
            masked_finest,
        )?;
        let vars = self.finish_loss(&mut g, pass, m)?;
        let grads = g.backward(vars.total)?;
        Ok(leaves
            .iter()
            .map(|&v| {
                grads
                    .get(v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec()))
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub swnd: Option<SwndConfig>,
    /// Steps between dead-code checks; 0 disables them.
    pub dead_code_every: usize,
    /// `None` uses `0.03 · frames / K`.
    pub dead_code_threshold: Option<f64>,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_start: 3e-4,
            lr_end: 1e-4,
            swnd: Some(SwndConfig::canonical()),
            dead_code_every: 50,
            dead_code_threshold: None,
            adamw: AdamWConfig::default(),
        }
    }
}

pub struct CodecTrainer {
    cfg: TrainConfig,
    opt: AdamW,
    step: usize,
}

fn no_decay(name: &str) -> bool {
    name.ends_with(".b")
}

impl CodecTrainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let opt = AdamW::new(cfg.adamw.clone());
        Self { cfg, opt, step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One optimizer step over `batch`, followed by EMA codebook updates.
    /// Returns the batch-mean loss.
    pub fn step<R: RngCore>(&mut self, codec: &mut Codec, batch: &[MelSpectrogram], rng: &mut R) -> Result<CodecLoss> {
        if batch.is_empty() {
            return Err(crate::CodecError::Input("empty batch".into()));
        }
        codec.init_codebooks(batch, rng)?;
        let n_scales = codec.config().scales.num_scales();
        let mut g = Graph::new();
        let b = codec.params().bind(&mut g, true);
        let mut totals = Vec::with_capacity(batch.len());
        let mut parts = Vec::with_capacity(batch.len());
        let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); n_scales];
        for m in batch {
            let masked = match &self.cfg.swnd {
                Some(cfg) => swnd_sample(cfg, rng),
                None => 0,
            };
            let vars = codec.loss_graph(&mut g, &b, m, QuantPath::Train(rng), masked)?;
            for (i, &r) in vars.pass.residuals.iter().enumerate() {
                residuals[i].extend_from_slice(g.value(r).data());
            }
            totals.push(vars.total);
            parts.push(codec.loss_values(&g, &vars));
        }
        let mut sum = totals[0];
        for &t in &totals[1..] {
            sum = g.add(sum, t)?;
        }
        let loss = g.scale(sum, 1.0 / batch.len() as f64)?;
        let grads = g.backward(loss)?;
        let grads = codec.params().collect_grads(&b, &grads);
        drop(g);
        let lr = ExpDecay {
            start: self.cfg.lr_start,
            end: self.cfg.lr_end,
            total_steps: self.cfg.steps,
        }
        .lr(self.step);
        self.opt.step(codec.params_mut(), &grads, lr, &no_decay);

        let latent = codec.config().scales.latent_dim;
        self.step += 1;
        let check_dead = self.cfg.dead_code_every > 0 && self.step.is_multiple_of(self.cfg.dead_code_every);
        for (i, data) in residuals.into_iter().enumerate() {
            let rows = data.len() / latent;
            let x = Tensor::new(vec![rows, latent], data)?;
            let q = &mut codec.quantizers_mut()[i];
            q.ema_update(&x)?;
            if check_dead {
                q.dead_code_reinit(&x, self.cfg.dead_code_threshold, rng)?;
            }
        }
        Ok(mean_loss(&parts))
    }
}

fn mean_loss(parts: &[CodecLoss]) -> CodecLoss {
    let n = parts.len() as f64;
    let avg = |f: fn(&CodecLoss) -> f64| parts.iter().map(f).sum::<f64>() / n;
    CodecLoss {
        l_vq: avg(|l| l.l_vq),
        l_reg: avg(|l| l.l_reg),
        l_adv: avg(|l| l.l_adv),
        total: avg(|l| l.total),
        lambda_vq: parts[0].lambda_vq,
        lambda_reg: parts[0].lambda_reg,
        lambda_adv: parts[0].lambda_adv,
    }
}
