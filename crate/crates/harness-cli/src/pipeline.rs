//! Training loops, evaluation and synthesis shared by the CLI and tests.

use std::io::Write;
use std::path::Path;

use cofi_codec::{
    Codec, CodecConfig, CodecTrainer, GlobalEmbedding, MultiScaleTokens, ScaleSpec, SwndConfig, TokenGrid, TrainConfig,
};
use cofi_lm::{
    attention_aggregate, bpe_train, build_icl_prompt, cos_example, generate_cos, generate_sos, sos_example,
    teacher_forced_accuracy, GenerateOptions, IclPrompt, LmConfig, LmError, LmExample, LmModel, LmTrainConfig,
    LmTrainer, Vocabulary,
};
use dsp_frontend::{mcd, mel_spectrogram, read_wav, MelSpectrogram, SAMPLE_RATE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor_core::{ExpDecay, Tensor};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::manifest::Manifest;

/// Longest accepted input audio.
pub const MAX_AUDIO_SECS: f64 = 30.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub text: String,
    pub mel: MelSpectrogram,
}

fn write_line(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| HarnessError::io(Path::new("<metrics>"), e))
}

pub fn load_audio_mel(path: &Path) -> Result<MelSpectrogram> {
    let w = read_wav(path)?;
    if w.sample_rate != SAMPLE_RATE {
        return Err(HarnessError::Data(format!(
            "{}: sample rate {} Hz, expected {SAMPLE_RATE}",
            path.display(),
            w.sample_rate
        )));
    }
    if w.duration_secs() > MAX_AUDIO_SECS {
        return Err(HarnessError::Data(format!(
            "{}: {:.1} s exceeds the {MAX_AUDIO_SECS} s limit",
            path.display(),
            w.duration_secs()
        )));
    }
    Ok(mel_spectrogram(&w)?)
}

/// Loads every manifest row; unreadable items are skipped with a warning.
pub fn load_corpus(m: &Manifest) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for row in &m.rows {
        match load_audio_mel(&row.audio) {
            Ok(mel) => out.push(Utterance {
                name: row
                    .audio
                    .file_stem()
                    .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
                text: row.text.clone(),
                mel,
            }),
            Err(e) => log::warn!("skipping {}: {e}", row.audio.display()),
        }
    }
    if out.is_empty() {
        return Err(HarnessError::Data("no usable items in the manifest".into()));
    }
    Ok(out)
}

pub fn toy_utterances() -> Result<Vec<Utterance>> {
    crate::toy::toy_corpus()
        .into_iter()
        .map(|item| {
            Ok(Utterance {
                name: item.name,
                text: item.text,
                mel: mel_spectrogram(&item.audio)?,
            })
        })
        .collect()
}

pub fn codec_config(cfg: &RunConfig) -> CodecConfig {
    CodecConfig::with_scales(
        ScaleSpec::canonical(cfg.codec_codebook_size, cfg.codec_latent_dim),
        cfg.codec_res_units,
        cfg.codec_extra_fine_units,
    )
}

pub const CODEC_METRICS_COLUMNS: &str = "step,lr,l_vq,l_reg,l_adv,total";

/// Picks whole utterances starting at a rotating offset until
/// `batch_frames` Mel frames are covered; 0 means the whole corpus.
fn batch_for(items: &[MelSpectrogram], batch_frames: usize, step: usize) -> Vec<MelSpectrogram> {
    if batch_frames == 0 {
        return items.to_vec();
    }
    let mut out = Vec::new();
    let mut frames = 0;
    let mut i = step % items.len();
    while frames < batch_frames && out.len() < items.len() {
        frames += items[i].n_frames();
        out.push(items[i].clone());
        i = (i + 1) % items.len();
    }
    out
}

/// Trains a codec from scratch. Writes one CSV row per step: the losses
/// and, per scale, the fraction of codewords whose EMA count is ≥ 1e-3.
pub fn train_codec(items: &[Utterance], cfg: &RunConfig, log: &mut dyn Write) -> Result<Codec> {
    if items.is_empty() {
        return Err(HarnessError::Data("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed(1));
    let mut codec = Codec::new(codec_config(cfg), &mut rng)?;
    let mels: Vec<MelSpectrogram> = items.iter().map(|u| u.mel.clone()).collect();
    codec.fit_normalization(&mels)?;
    let swnd = cfg.codec_swnd.clone().map(SwndConfig::new).transpose()?;
    let tc = TrainConfig {
        steps: cfg.codec_steps,
        lr_start: cfg.codec_lr_start,
        lr_end: cfg.codec_lr_end,
        swnd,
        dead_code_every: cfg.codec_dead_code_every,
        ..TrainConfig::default()
    };
    let schedule = ExpDecay {
        start: tc.lr_start,
        end: tc.lr_end,
        total_steps: tc.steps,
    };
    let n = codec.config().scales.num_scales();
    let usage_cols: Vec<String> = (0..n).map(|i| format!("usage_{i}")).collect();
    write_line(log, &format!("{CODEC_METRICS_COLUMNS},{}", usage_cols.join(",")))?;
    let mut trainer = CodecTrainer::new(tc);
    for step in 0..cfg.codec_steps {
        let batch = batch_for(&mels, cfg.codec_batch_frames, step);
        let l = trainer.step(&mut codec, &batch, &mut rng)?;
        let usage: Vec<String> = codec
            .quantizers()
            .iter()
            .map(|q| {
                let (used, total) = q.codebooks().iter().fold((0, 0), |(u, t), cb| {
                    (
                        u + cb.ema_counts().iter().filter(|&&c| c >= 1e-3).count(),
                        t + cb.size(),
                    )
                });
                (used as f64 / total as f64).to_string()
            })
            .collect();
        write_line(
            log,
            &format!(
                "{step},{},{},{},{},{},{}",
                schedule.lr(step),
                l.l_vq,
                l.l_reg,
                l.l_adv,
                l.total,
                usage.join(",")
            ),
        )?;
        if step % 100 == 0 {
            log::info!("codec step {step}: l_reg {:.4} l_vq {:.4}", l.l_reg, l.l_vq);
        }
    }
    Ok(codec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconRow {
    pub name: String,
    pub frames: usize,
    pub mcd: f64,
}

/// Encode→decode MCD per item over the unpadded frames.
pub fn eval_recon(codec: &Codec, items: &[Utterance]) -> Result<Vec<ReconRow>> {
    let n = codec.config().scales.num_scales();
    Ok(eval_ablation(codec, items)?
        .into_iter()
        .zip(items)
        .map(|(row, u)| ReconRow {
            name: u.name.clone(),
            frames: u.mel.n_frames(),
            mcd: row[n - 1],
        })
        .collect())
}

/// MCD per item for every `keep_b` in `1..=N_s` (column `b−1`).
pub fn eval_ablation(codec: &Codec, items: &[Utterance]) -> Result<Vec<Vec<f64>>> {
    let n = codec.config().scales.num_scales();
    items
        .iter()
        .map(|u| {
            let (t, g) = codec.encode_to_tokens(&u.mel)?;
            (1..=n)
                .map(|b| Ok(mcd(&u.mel, &codec.reconstruct_top_b(&t, &g, b)?)?))
                .collect()
        })
        .collect()
}

pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn recon_csv(rows: &[ReconRow]) -> String {
    let mut s = String::from("name,frames,mcd\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.name, r.frames, r.mcd));
    }
    s.push_str(&format!(
        "mean,{},{}\n",
        rows.iter().map(|r| r.frames).sum::<usize>(),
        mean(rows.iter().map(|r| r.mcd))
    ));
    s
}

/// One block per codec (`model` column), rows per item plus a mean row.
pub fn ablation_csv(labelled: &[(&str, Vec<Vec<f64>>)], items: &[Utterance]) -> String {
    let n = labelled.first().map_or(0, |(_, rows)| rows.first().map_or(0, Vec::len));
    let cols: Vec<String> = (1..=n).map(|b| format!("mcd_keep_{b}")).collect();
    let mut s = format!("model,name,{}\n", cols.join(","));
    for (label, rows) in labelled {
        for (row, u) in rows.iter().zip(items) {
            s.push_str(&format!("{label},{},{}\n", u.name, join_f(row)));
        }
        let means: Vec<f64> = (0..n).map(|b| mean(rows.iter().map(|r| r[b]))).collect();
        s.push_str(&format!("{label},mean,{}\n", join_f(&means)));
    }
    s
}

fn join_f(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Which language model a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmKind {
    Cos,
    SosStage(usize),
}

impl LmKind {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.strip_prefix("lm-").unwrap_or(s);
        if s == "cos" {
            return Ok(Self::Cos);
        }
        s.strip_prefix("sos-stage-")
            .and_then(|i| i.parse().ok())
            .map(Self::SosStage)
            .ok_or_else(|| HarnessError::Usage(format!("unknown LM mode {s:?} (cos or sos-stage-<i>)")))
    }

    pub fn checkpoint_kind(self) -> String {
        match self {
            Self::Cos => "lm-cos".into(),
            Self::SosStage(i) => format!("lm-sos-stage-{i}"),
        }
    }
}

/// Text ids, codec tokens and global embedding of one training item.
#[derive(Clone, Debug, PartialEq)]
pub struct LmItem {
    pub name: String,
    pub text_ids: Vec<u32>,
    pub tokens: MultiScaleTokens,
    pub g: GlobalEmbedding,
}

pub fn train_vocab(texts: &[String], size: usize, spec: &ScaleSpec) -> Result<Vocabulary> {
    Ok(Vocabulary::new(bpe_train(texts, size)?, spec.codebook_size.clone())?)
}

pub fn encode_corpus(codec: &Codec, vocab: &Vocabulary, items: &[Utterance]) -> Result<Vec<LmItem>> {
    items
        .iter()
        .map(|u| {
            let (tokens, g) = codec.encode_to_tokens(&u.mel)?;
            Ok(LmItem {
                name: u.name.clone(),
                text_ids: vocab.encode_text(&u.text),
                tokens,
                g,
            })
        })
        .collect()
}

pub fn lm_config(cfg: &RunConfig, vocab: &Vocabulary, spec: &ScaleSpec, kind: LmKind, cond_dim: usize) -> LmConfig {
    let (streams, g_dim, cond) = match kind {
        LmKind::Cos => (spec.num_streams.iter().copied().max().unwrap_or(1), spec.latent_dim, 0),
        LmKind::SosStage(0) => (spec.num_streams[0], spec.latent_dim, 0),
        LmKind::SosStage(i) => (spec.num_streams[i], 0, cond_dim),
    };
    LmConfig {
        vocab_size: vocab.size(),
        dim: cfg.lm_dim,
        layers: cfg.lm_layers,
        heads: cfg.lm_heads,
        max_len: cfg.lm_max_len,
        streams,
        g_dim,
        cond_dim: cond,
    }
}

/// Teacher-forced hidden states that condition stack stage `stages.len()`.
pub fn stage_condition(stages: &[LmModel], vocab: &Vocabulary, item: &LmItem) -> Result<Option<Tensor>> {
    let mut h = None;
    for (i, m) in stages.iter().enumerate() {
        let ex = sos_example(vocab, i, &item.text_ids, &item.tokens, &item.g.g, h.as_ref())?;
        let out = m.forward(&ex.input)?;
        h = Some(out.hidden.select(&ex.frame_positions)?);
    }
    Ok(h)
}

pub fn lm_examples(kind: LmKind, vocab: &Vocabulary, items: &[LmItem], cond: &[LmModel]) -> Result<Vec<LmExample>> {
    items
        .iter()
        .map(|it| match kind {
            LmKind::Cos => Ok(cos_example(vocab, &it.text_ids, &it.tokens, &it.g.g)?),
            LmKind::SosStage(i) => {
                if cond.len() != i {
                    return Err(HarnessError::Config(format!(
                        "stage {i} needs the {i} coarser stage checkpoints, got {}",
                        cond.len()
                    )));
                }
                let h = stage_condition(cond, vocab, it)?;
                Ok(sos_example(vocab, i, &it.text_ids, &it.tokens, &it.g.g, h.as_ref())?)
            }
        })
        .collect()
}

pub const LM_METRICS_COLUMNS: &str = "step,lr,loss,tokens";

/// Trains one LM on the whole corpus per step; returns the model and its
/// final teacher-forced accuracy.
pub fn train_lm(
    kind: LmKind,
    vocab: &Vocabulary,
    items: &[LmItem],
    cond: &[LmModel],
    cfg: &RunConfig,
    log: &mut dyn Write,
) -> Result<(LmModel, f64)> {
    let spec = &items
        .first()
        .ok_or_else(|| HarnessError::Data("empty training set".into()))?
        .tokens
        .spec;
    let examples = lm_examples(kind, vocab, items, cond)?;
    let cond_dim = cond.last().map_or(0, |m| m.config().dim);
    let offset = match kind {
        LmKind::Cos => 10,
        LmKind::SosStage(i) => 20 + i as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed(offset));
    let mut model = LmModel::new(lm_config(cfg, vocab, spec, kind, cond_dim), &mut rng)?;
    let mut trainer = LmTrainer::new(LmTrainConfig {
        steps: cfg.lm_steps,
        lr_start: cfg.lm_lr_start,
        lr_end: cfg.lm_lr_end,
        ..LmTrainConfig::default()
    });
    write_line(log, LM_METRICS_COLUMNS)?;
    for step in 0..cfg.lm_steps {
        let s = trainer.step(&mut model, &examples)?;
        write_line(log, &format!("{},{},{},{}", s.step, s.lr, s.loss, s.tokens))?;
        if step % 50 == 0 {
            log::info!("{} step {step}: loss {:.4}", kind.checkpoint_kind(), s.loss);
        }
    }
    let acc = teacher_forced_accuracy(&model, &examples)?;
    Ok((model, acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Cos,
    Sos,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cos" => Ok(Self::Cos),
            "sos" => Ok(Self::Sos),
            _ => Err(HarnessError::Usage(format!("unknown mode {s:?} (cos or sos)"))),
        }
    }
}

/// Everything generation needs besides the codec.
#[derive(Clone, Debug)]
pub struct LmBundle {
    pub mode: Mode,
    pub vocab: Vocabulary,
    /// One model for `Cos`; one per scale, coarse first, for `Sos`.
    pub models: Vec<LmModel>,
}

fn generation_error(e: LmError) -> HarnessError {
    match e {
        LmError::Generation { .. } | LmError::Alignment(_) => HarnessError::Generation(e),
        other => HarnessError::Lm(other),
    }
}

pub fn generate(
    bundle: &LmBundle,
    spec: &ScaleSpec,
    prompt: &IclPrompt,
    opts: &GenerateOptions,
) -> Result<MultiScaleTokens> {
    match bundle.mode {
        Mode::Cos => {
            let [m] = bundle.models.as_slice() else {
                return Err(HarnessError::Config(
                    "chain-of-scale mode takes exactly one model".into(),
                ));
            };
            generate_cos(m, &bundle.vocab, spec, prompt, opts).map_err(generation_error)
        }
        Mode::Sos => generate_sos(&bundle.models, &bundle.vocab, spec, prompt, opts).map_err(generation_error),
    }
}

/// Reference audio for the prompt. Without a transcript only its global
/// embedding is used.
pub struct Reference<'a> {
    pub mel: &'a MelSpectrogram,
    pub text: Option<&'a str>,
}

pub fn build_prompt(codec: &Codec, vocab: &Vocabulary, text: &str, reference: &Reference<'_>) -> Result<IclPrompt> {
    if text.trim().is_empty() {
        return Err(HarnessError::Usage("empty text".into()));
    }
    let spec = &codec.config().scales;
    let target = vocab.encode_text(text);
    match reference.text {
        Some(rt) => {
            let (tok, g) = codec.encode_to_tokens(reference.mel)?;
            Ok(build_icl_prompt(
                Some(&tok),
                &spec.num_streams,
                &vocab.encode_text(rt),
                &target,
                g,
            )?)
        }
        None => {
            let g = codec.reference_embed(reference.mel)?;
            Ok(build_icl_prompt(None, &spec.num_streams, &[], &target, g)?)
        }
    }
}

/// Drops the reference prefix from generated grids.
pub fn strip_reference(t: &MultiScaleTokens, prompt: &IclPrompt) -> Result<MultiScaleTokens> {
    if !prompt.has_reference() {
        return Ok(t.clone());
    }
    let grids = t
        .grids
        .iter()
        .zip(prompt.cursors())
        .map(|(g, c)| TokenGrid::new(g.frames - c, g.streams, g.data[c * g.streams..].to_vec()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if grids[0].frames == 0 {
        return Err(HarnessError::Generation(LmError::Generation {
            scale: 0,
            position: prompt.cursors()[0],
            detail: "nothing generated after the reference".into(),
        }));
    }
    let source = grids[0].frames * t.spec.total_factor();
    Ok(MultiScaleTokens::new(grids, t.spec.clone(), source)?)
}

pub struct Synthesis {
    pub tokens: MultiScaleTokens,
    pub g: GlobalEmbedding,
    pub mel: MelSpectrogram,
}

pub fn synthesize(
    codec: &Codec,
    bundle: &LmBundle,
    text: &str,
    reference: &Reference<'_>,
    opts: &GenerateOptions,
) -> Result<Synthesis> {
    let prompt = build_prompt(codec, &bundle.vocab, text, reference)?;
    let full = generate(bundle, &codec.config().scales, &prompt, opts)?;
    let tokens = strip_reference(&full, &prompt)?;
    let mel = codec.decode_from_tokens(&tokens, &prompt.g)?;
    Ok(Synthesis {
        tokens,
        g: prompt.g,
        mel,
    })
}

/// Aggregated attention of every model over the given token layout:
/// one map for chain-of-scale, one per stage for stack-of-scale.
pub fn attention_maps(
    bundle: &LmBundle,
    text_ids: &[u32],
    tokens: &MultiScaleTokens,
    g: &GlobalEmbedding,
) -> Result<Vec<Tensor>> {
    let v = &bundle.vocab;
    match bundle.mode {
        Mode::Cos => {
            let ex = cos_example(v, text_ids, tokens, &g.g)?;
            let out = bundle.models[0].forward(&ex.input)?;
            Ok(vec![attention_aggregate(&out.attn)?])
        }
        Mode::Sos => {
            let mut maps = Vec::new();
            let mut h: Option<Tensor> = None;
            for (i, m) in bundle.models.iter().enumerate() {
                let ex = sos_example(v, i, text_ids, tokens, &g.g, h.as_ref())?;
                let out = m.forward(&ex.input)?;
                maps.push(attention_aggregate(&out.attn)?);
                h = Some(out.hidden.select(&ex.frame_positions)?);
            }
            Ok(maps)
        }
    }
}

/// Binary greyscale image, pixel = round(255 · value).
pub fn pgm_bytes(map: &Tensor) -> Vec<u8> {
    let (h, w) = (map.rows(), map.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

pub fn map_csv(map: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..map.rows() {
        s.push_str(&join_f(map.row(r)));
        s.push('\n');
    }
    s
}

/// Content hash in git's object form: SHA-256 over `blob <len>\0<bytes>`.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}
