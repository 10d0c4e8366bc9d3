use dsp_frontend::{log_floor, MelSpectrogram, N_MELS};
use quantizers::{QuantResult, Quantizer};
use rand::{Rng, RngCore};
use tensor_core::{Bound, Graph, ParamStore, Tensor, Var};

use crate::config::CodecConfig;
use crate::layers::{conv, conv_transposed, init_conv, init_linear, init_resnet, linear, resnet};
use crate::tokens::{MultiScaleTokens, TokenGrid};
use crate::{CodecError, Result};

/// Time-invariant utterance embedding `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEmbedding {
    pub g: Vec<f64>,
}

/// How the decoder obtains each scale's quantized sequence.
pub enum QuantPath<'a> {
    /// Nearest codeword, no stream masking.
    Nearest,
    /// Nearest codeword with ordered-PQ stream drops drawn from the rng.
    Train(&'a mut dyn RngCore),
    /// Quantization replaced by identity.
    Identity,
    /// Codeword lookup from existing tokens; the encoder is skipped.
    Tokens(&'a MultiScaleTokens),
}

/// Result of one decoder block on concrete tensors.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub residual: Tensor,
    pub quant: Option<QuantResult>,
    pub fused: Tensor,
    pub next: Tensor,
}

/// Graph handles from one codec pass, scale lists coarse→fine.
pub(crate) struct GraphPass {
    pub recon: Var,
    pub encodings: Vec<Var>,
    pub residuals: Vec<Var>,
    pub decodings: Vec<Var>,
    pub fused: Vec<Var>,
    pub quant: Vec<Option<QuantResult>>,
    pub vq_losses: Vec<Option<Var>>,
    pub g: Var,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    config: CodecConfig,
    params: ParamStore,
    quantizers: Vec<Quantizer>,
    norm_mean: Vec<f64>,
    norm_std: f64,
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(config: CodecConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.scales.latent_dim;
        let k = config.kernel;
        let n = config.scales.num_scales();
        let mut p = ParamStore::new();
        init_conv(&mut p, "enc.in", c, N_MELS, k, rng);
        for i in 0..n {
            let units = config.res_units + if i == n - 1 { config.extra_fine_units } else { 0 };
            init_resnet(&mut p, &format!("enc.{i}.res"), units, c, k, rng);
            init_conv(&mut p, &format!("enc.{i}.down"), c, c, config.scales.up_stride(i), rng);
            init_resnet(&mut p, &format!("dec.{i}.res"), units, c, k, rng);
            init_conv(&mut p, &format!("dec.{i}.up"), c, c, config.scales.up_stride(i), rng);
        }
        init_conv(&mut p, "ref.conv", c, N_MELS, config.ref_kernel, rng);
        init_linear(&mut p, "ref.proj", 2 * c, c, rng);
        init_linear(&mut p, "head", c, N_MELS, rng);
        let quantizers = (0..n)
            .map(|i| Quantizer::new(config.quantizer_config(i), config.ema_decay))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            config,
            params: p,
            quantizers,
            norm_mean: vec![0.0; N_MELS],
            norm_std: 1.0,
        })
    }

    pub fn from_parts(
        config: CodecConfig,
        params: ParamStore,
        quantizers: Vec<Quantizer>,
        norm_mean: Vec<f64>,
        norm_std: f64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fresh = Self::new(config.clone(), &mut rng)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(CodecError::Config(format!("parameter {name} missing or misshapen"))),
            }
        }
        if params.len() != fresh.params.len() {
            return Err(CodecError::Config("unexpected parameters in checkpoint".into()));
        }
        if quantizers.len() != config.scales.num_scales()
            || quantizers
                .iter()
                .enumerate()
                .any(|(i, q)| *q.config() != config.quantizer_config(i))
        {
            return Err(CodecError::Config("quantizers do not match the scale spec".into()));
        }
        if norm_mean.len() != N_MELS || !(norm_std > 0.0) {
            return Err(CodecError::Config("invalid normalization statistics".into()));
        }
        Ok(Self {
            config,
            params,
            quantizers,
            norm_mean,
            norm_std,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn quantizers(&self) -> &[Quantizer] {
        &self.quantizers
    }

    pub fn quantizers_mut(&mut self) -> &mut [Quantizer] {
        &mut self.quantizers
    }

    pub fn normalization(&self) -> (&[f64], f64) {
        (&self.norm_mean, self.norm_std)
    }

    /// Per-band mean and a single global standard deviation over all frames.
    pub fn fit_normalization(&mut self, mels: &[MelSpectrogram]) -> Result<()> {
        let frames: usize = mels.iter().map(MelSpectrogram::n_frames).sum();
        if frames == 0 {
            return Err(CodecError::Input("no frames to normalize".into()));
        }
        let mut mean = vec![0.0; N_MELS];
        for m in mels {
            for f in m.frames() {
                for (a, v) in mean.iter_mut().zip(f) {
                    *a += v;
                }
            }
        }
        mean.iter_mut().for_each(|a| *a /= frames as f64);
        let mut var = 0.0;
        for m in mels {
            for f in m.frames() {
                var += f.iter().zip(&mean).map(|(v, a)| (v - a) * (v - a)).sum::<f64>();
            }
        }
        let std = (var / (frames * N_MELS) as f64).sqrt();
        self.norm_mean = mean;
        self.norm_std = if std > 1e-8 { std } else { 1.0 };
        Ok(())
    }

    /// Normalized Mel, right-padded with the log floor to a multiple of
    /// the coarsest frameshift.
    fn normalized_input(&self, m: &MelSpectrogram, pad: bool) -> Result<Tensor> {
        let t = m.n_frames();
        if t == 0 {
            return Err(CodecError::Input("empty spectrogram".into()));
        }
        let rows = if pad { self.config.scales.padded_frames(t) } else { t };
        let floor = log_floor();
        let mut data = Vec::with_capacity(rows * N_MELS);
        for r in 0..rows {
            for b in 0..N_MELS {
                let v = if r < t { m.frame(r)[b] } else { floor };
                data.push((v - self.norm_mean[b]) / self.norm_std);
            }
        }
        Ok(Tensor::new(vec![rows, N_MELS], data)?)
    }

    fn encoder_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Vec<Var>> {
        let n = self.config.scales.num_scales();
        let k = self.config.kernel;
        let mut h = conv(g, b, "enc.in", x, 1, k / 2)?;
        let mut out = Vec::with_capacity(n);
        for i in (0..n).rev() {
            let units = self.units(i);
            h = resnet(g, b, &format!("enc.{i}.res"), units, k, h)?;
            let s = self.config.scales.up_stride(i);
            h = conv(g, b, &format!("enc.{i}.down"), h, s, 0)?;
            out.push(h);
        }
        out.reverse();
        Ok(out)
    }

    fn units(&self, i: usize) -> usize {
        let last = self.config.scales.num_scales() - 1;
        self.config.res_units + if i == last { self.config.extra_fine_units } else { 0 }
    }

    fn reference_graph(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = conv(g, b, "ref.conv", x, 1, self.config.ref_kernel / 2)?;
        let h = g.gelu(h)?;
        let rows = g.value(h).rows();
        let mean = g.mean_rows(h)?;
        let mean_b = g.broadcast_rows(mean, rows)?;
        let centered = g.sub(h, mean_b)?;
        let sq = g.mul(centered, centered)?;
        let var = g.mean_rows(sq)?;
        let eps = g.constant(Tensor::filled(vec![1, self.config.scales.latent_dim], 1e-5));
        let var = g.add(var, eps)?;
        let std = g.sqrt(var)?;
        let stats = g.concat_cols(&[mean, std])?;
        Ok(linear(g, b, "ref.proj", stats)?)
    }

    /// One decoder block: residual, quantization, additive fusion, ResNet
    /// and upsampling. `q_override` supplies the quantized sequence directly.
    #[allow(clippy::too_many_arguments)]
    fn decode_block(
        &self,
        g: &mut Graph,
        b: &Bound,
        i: usize,
        e: Option<Var>,
        d: Var,
        gv: Var,
        path: &mut QuantPath<'_>,
        masked: bool,
    ) -> Result<(Option<Var>, Var, Option<QuantResult>, Option<Var>, Var)> {
        let quant = &self.quantizers[i];
        let latent = self.config.scales.latent_dim;
        let rows = g.value(d).rows();
        let residual = match e {
            Some(e) => Some(g.sub(e, d)?),
            None => None,
        };
        let (q, result, vq) = match (&mut *path, residual) {
            (QuantPath::Tokens(t), _) => {
                let grid = &t.grids[i];
                let cw = quant.decode(&grid.as_indices())?;
                (g.constant(cw), None, None)
            }
            (QuantPath::Identity, Some(r)) => (r, None, None),
            (QuantPath::Nearest, Some(r)) => {
                let res = quant.quantize(g.value(r))?;
                let q = g.straight_through(r, res.quantized.clone())?;
                let vq = self.commitment(g, i, r, &res)?;
                (q, Some(res), Some(vq))
            }
            (QuantPath::Train(rng), Some(r)) => {
                let rv = g.value(r).clone();
                let res = quant.quantize_train(&rv, &mut **rng)?;
                let q = self.straight_through_kept(g, r, &res)?;
                let vq = self.commitment(g, i, r, &res)?;
                (q, Some(res), Some(vq))
            }
            (_, None) => return Err(CodecError::Input("encodings required for this path".into())),
        };
        let q = if masked {
            g.constant(Tensor::zeros(vec![rows, latent]))
        } else {
            q
        };
        let vq = if masked { None } else { vq };
        let fused = g.add(q, d)?;
        let gb = g.broadcast_rows(gv, rows)?;
        let fused = g.add(fused, gb)?;
        let h = resnet(g, b, &format!("dec.{i}.res"), self.units(i), self.config.kernel, fused)?;
        let next = conv_transposed(g, b, &format!("dec.{i}.up"), h, self.config.scales.up_stride(i))?;
        Ok((residual, fused, result, vq, next))
    }

    /// `mean_t ‖r_t − q_t‖²` against the unmasked codewords.
    fn commitment(&self, g: &mut Graph, i: usize, r: Var, res: &QuantResult) -> Result<Var> {
        let full = if res.kept_streams == res.num_streams {
            res.quantized.clone()
        } else {
            self.quantizers[i].decode(&res.indices)?
        };
        let target = g.constant(full);
        let mse = g.mse(r, target)?;
        Ok(g.scale(mse, self.config.scales.latent_dim as f64)?)
    }

    /// Straight-through on kept streams; dropped stream columns are constant zeros.
    fn straight_through_kept(&self, g: &mut Graph, r: Var, res: &QuantResult) -> Result<Var> {
        if res.kept_streams == res.num_streams {
            return Ok(g.straight_through(r, res.quantized.clone())?);
        }
        let (rows, d) = (res.quantized.rows(), res.quantized.cols());
        let sub = d / res.num_streams;
        let kept = res.kept_streams * sub;
        let zeros = g.constant(Tensor::zeros(vec![rows, d - kept]));
        if kept == 0 {
            return Ok(zeros);
        }
        let head = g.slice_cols(r, 0, kept)?;
        let qd: Vec<f64> = (0..rows).flat_map(|t| res.quantized.row(t)[..kept].to_vec()).collect();
        let st = g.straight_through(head, Tensor::new(vec![rows, kept], qd)?)?;
        Ok(g.concat_cols(&[st, zeros])?)
    }

    /// Full pass over one utterance. `masked_finest` zeroes the quantized
    /// sequences of that many finest scales.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        m: &MelSpectrogram,
        mut path: QuantPath<'_>,
        masked_finest: usize,
    ) -> Result<GraphPass> {
        let x = g.constant(self.normalized_input(m, true)?);
        let encodings = self.encoder_graph(g, b, x)?;
        let xr = g.constant(self.normalized_input(m, false)?);
        let gv = self.reference_graph(g, b, xr)?;
        self.decoder_graph(g, b, encodings, gv, m.n_frames(), &mut path, masked_finest)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn decoder_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        encodings: Vec<Var>,
        gv: Var,
        frames: usize,
        path: &mut QuantPath<'_>,
        masked_finest: usize,
    ) -> Result<GraphPass> {
        let n = self.config.scales.num_scales();
        if masked_finest >= n {
            return Err(CodecError::Input(format!("cannot mask {masked_finest} of {n} scales")));
        }
        let lengths = self.config.scales.scale_lengths(frames);
        let latent = self.config.scales.latent_dim;
        let mut d = g.constant(Tensor::zeros(vec![lengths[0], latent]));
        let mut pass = GraphPass {
            recon: d,
            encodings: Vec::new(),
            residuals: Vec::new(),
            decodings: Vec::new(),
            fused: Vec::new(),
            quant: Vec::new(),
            vq_losses: Vec::new(),
            g: gv,
            frames,
        };
        for i in 0..n {
            let e = encodings.get(i).copied();
            let masked = i >= n - masked_finest;
            let (r, fused, res, vq, next) = self.decode_block(g, b, i, e, d, gv, path, masked)?;
            if let Some(r) = r {
                pass.residuals.push(r);
            }
            pass.decodings.push(d);
            pass.fused.push(fused);
            pass.quant.push(res);
            pass.vq_losses.push(vq);
            d = next;
        }
        let pred = linear(g, b, "head", d)?;
        let scaled = g.scale(pred, self.norm_std)?;
        let mean = g.constant(Tensor::new(vec![N_MELS], self.norm_mean.clone())?);
        pass.recon = g.add_bias(scaled, mean)?;
        pass.encodings = encodings;
        Ok(pass)
    }

    /// Per-scale encodings `e^i`, coarse→fine.
    pub fn encode_scales(&self, m: &MelSpectrogram) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(self.normalized_input(m, true)?);
        let enc = self.encoder_graph(&mut g, &b, x)?;
        Ok(enc.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn reference_embed(&self, m: &MelSpectrogram) -> Result<GlobalEmbedding> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(self.normalized_input(m, false)?);
        let v = self.reference_graph(&mut g, &b, x)?;
        Ok(GlobalEmbedding {
            g: g.value(v).data().to_vec(),
        })
    }

    fn embedding_var(&self, g: &mut Graph, emb: &GlobalEmbedding) -> Result<Var> {
        if emb.g.len() != self.config.scales.latent_dim {
            return Err(CodecError::Input(format!(
                "global embedding has {} values, latent_dim is {}",
                emb.g.len(),
                self.config.scales.latent_dim
            )));
        }
        Ok(g.constant(Tensor::new(vec![1, emb.g.len()], emb.g.clone())?))
    }

    /// One decoder block on concrete tensors. With `identity` the
    /// quantizer is bypassed.
    pub fn decode_step(
        &self,
        scale: usize,
        e: &Tensor,
        d: &Tensor,
        emb: &GlobalEmbedding,
        identity: bool,
    ) -> Result<DecodeOutput> {
        if scale >= self.config.scales.num_scales() {
            return Err(CodecError::Input(format!("no scale {scale}")));
        }
        if e.shape() != d.shape() {
            return Err(CodecError::Tensor(tensor_core::TensorError::Dim {
                op: "decode_step",
                detail: format!("e {:?} vs d {:?}", e.shape(), d.shape()),
            }));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let ev = g.constant(e.clone());
        let dv = g.constant(d.clone());
        let gv = self.embedding_var(&mut g, emb)?;
        let mut path = if identity {
            QuantPath::Identity
        } else {
            QuantPath::Nearest
        };
        let (r, fused, quant, _, next) = self.decode_block(&mut g, &b, scale, Some(ev), dv, gv, &mut path, false)?;
        Ok(DecodeOutput {
            residual: g.value(r.expect("encoding given")).clone(),
            quant,
            fused: g.value(fused).clone(),
            next: g.value(next).clone(),
        })
    }

    fn to_mel(&self, g: &Graph, pass: &GraphPass) -> Result<MelSpectrogram> {
        let t = g.value(pass.recon);
        let data = t.data()[..pass.frames * N_MELS].to_vec();
        Ok(MelSpectrogram::from_flat(data)?)
    }

    /// Encode → decode with nearest-codeword quantization.
    pub fn reconstruct(&self, m: &MelSpectrogram) -> Result<MelSpectrogram> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let pass = self.forward_graph(&mut g, &b, m, QuantPath::Nearest, 0)?;
        self.to_mel(&g, &pass)
    }

    /// Decoder-side quantization of every scale plus the global embedding.
    pub fn encode_to_tokens(&self, m: &MelSpectrogram) -> Result<(MultiScaleTokens, GlobalEmbedding)> {
        if !self.quantizers.iter().all(Quantizer::is_initialized) {
            return Err(CodecError::Config("codebooks are not initialized".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let pass = self.forward_graph(&mut g, &b, m, QuantPath::Nearest, 0)?;
        let grids = pass
            .quant
            .iter()
            .map(|r| {
                let r = r.as_ref().expect("nearest path quantizes");
                TokenGrid::new(r.frames(), r.num_streams, r.indices.iter().map(|&i| i as u32).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let tokens = MultiScaleTokens::new(grids, self.config.scales.clone(), m.n_frames())?;
        let emb = GlobalEmbedding {
            g: g.value(pass.g).data().to_vec(),
        };
        Ok((tokens, emb))
    }

    pub fn decode_from_tokens(&self, t: &MultiScaleTokens, emb: &GlobalEmbedding) -> Result<MelSpectrogram> {
        self.reconstruct_top_b(t, emb, self.config.scales.num_scales())
    }

    /// Decodes using only the `keep_b` coarsest scales; finer quantized
    /// sequences are replaced by zeros.
    pub fn reconstruct_top_b(
        &self,
        t: &MultiScaleTokens,
        emb: &GlobalEmbedding,
        keep_b: usize,
    ) -> Result<MelSpectrogram> {
        let n = self.config.scales.num_scales();
        if keep_b == 0 || keep_b > n {
            return Err(CodecError::Input(format!("keep_b {keep_b} outside 1..={n}")));
        }
        if t.spec != self.config.scales {
            return Err(CodecError::Config("token scale spec differs from the codec".into()));
        }
        t.validate()?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let gv = self.embedding_var(&mut g, emb)?;
        let mut path = QuantPath::Tokens(t);
        let pass = self.decoder_graph(&mut g, &b, Vec::new(), gv, t.source_frames, &mut path, n - keep_b)?;
        self.to_mel(&g, &pass)
    }

    /// Data-dependent codebook initialization, coarse scale first so finer
    /// codebooks are seeded from realistic residuals.
    pub fn init_codebooks<R: Rng + ?Sized>(&mut self, mels: &[MelSpectrogram], rng: &mut R) -> Result<()> {
        for i in 0..self.config.scales.num_scales() {
            if self.quantizers[i].is_initialized() {
                continue;
            }
            let residuals = self.collect_residuals(mels, i)?;
            self.quantizers[i].ensure_initialized(&residuals, rng)?;
        }
        Ok(())
    }

    /// Stacked residual frames `e^i − d^i` over all utterances.
    fn collect_residuals(&self, mels: &[MelSpectrogram], scale: usize) -> Result<Tensor> {
        let mut data = Vec::new();
        let mut rows = 0;
        for m in mels {
            let mut g = Graph::new();
            let b = self.params.bind(&mut g, false);
            let pass = self.forward_graph(&mut g, &b, m, QuantPath::Nearest, 0)?;
            let r = g.value(pass.residuals[scale]);
            rows += r.rows();
            data.extend_from_slice(r.data());
        }
        Ok(Tensor::new(vec![rows, self.config.scales.latent_dim], data)?)
    }
}
