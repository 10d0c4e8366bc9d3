use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cofi_lm::{GenerateOptions, Vocabulary};
use dsp_frontend::{griffin_lim, write_wav, MelSpectrogram};
use harness_cli::checkpoint::{
    codec_from_checkpoint, codec_to_checkpoint, lm_from_checkpoint, lm_to_checkpoint, vocab_hash, Checkpoint,
};
use harness_cli::config::RunConfig;
use harness_cli::manifest::Manifest;
use harness_cli::pipeline::{self, LmBundle, LmKind, Mode, Reference};
use harness_cli::tokenfile::{load_tokens, save_tokens};
use harness_cli::HarnessError;

#[derive(Parser)]
#[command(
    name = "cofi",
    version,
    about = "Multi-scale speech codec and coarse-to-fine codec language models"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for single-file outputs)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy corpus (WAVs and manifest.tsv)
    ToyCorpus,
    /// Train a codec; writes codec.ckpt and codec_metrics.csv
    TrainCodec {
        #[arg(long)]
        manifest: PathBuf,
        /// Train without scale-wise nested dropout
        #[arg(long)]
        no_swnd: bool,
    },
    /// Train the BPE text vocabulary; writes vocab.txt
    BpeTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Train a language model (cos or sos-stage-<i>)
    TrainLm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        mode: String,
        /// Coarser stack stages, coarsest first (required for sos-stage-<i>, i > 0)
        #[arg(long = "cond-ckpt")]
        cond_ckpt: Vec<PathBuf>,
    },
    /// Encode one WAV into a token file
    Encode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        audio: PathBuf,
    },
    /// Decode a token file to a Mel CSV and a Griffin-Lim WAV
    Decode {
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
    },
    /// Generate speech for a text
    Synthesize(SynthArgs),
    /// Reconstruction MCD per item
    EvalRecon {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codec: PathBuf,
    },
    /// MCD when decoding from the top-b scales only
    EvalAblation {
        #[arg(long)]
        manifest: PathBuf,
        /// One or more codecs, e.g. with and without nested dropout
        #[arg(long, required = true)]
        codec: Vec<PathBuf>,
    },
    /// Aggregated attention maps as PGM images and CSV
    AttnDump(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    codec: PathBuf,
    /// LM checkpoints: one for cos, one per scale (coarsest first) for sos
    #[arg(long = "lm", required = true)]
    lm: Vec<PathBuf>,
    #[arg(long)]
    mode: String,
    #[arg(long)]
    text: String,
    /// Reference audio supplying the global embedding
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Reference transcript; enables the in-context speech prompt
    #[arg(long)]
    ref_text: Option<String>,
    /// Greedy decoding instead of the configured sampler
    #[arg(long)]
    greedy: bool,
    /// Skip the Griffin-Lim waveform
    #[arg(long)]
    no_wav: bool,
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    HarnessError::Usage(msg.into()).into()
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().ok_or_else(|| usage("--out is required"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.sampler.seed = cfg.sub_seed(100);
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_codec(path: &Path) -> Result<cofi_codec::Codec> {
    Ok(codec_from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_bundle(mode: &str, paths: &[PathBuf]) -> Result<LmBundle> {
    let mode = Mode::parse(mode)?;
    let mut models = Vec::new();
    let mut vocab: Option<Vocabulary> = None;
    for (i, p) in paths.iter().enumerate() {
        let ck = Checkpoint::load(p)?;
        let expected = match mode {
            Mode::Cos => LmKind::Cos,
            Mode::Sos => LmKind::SosStage(i),
        };
        if LmKind::parse(&ck.kind)? != expected {
            return Err(usage(format!(
                "{} holds {}, expected {}",
                p.display(),
                ck.kind,
                expected.checkpoint_kind()
            )));
        }
        let (m, v) = lm_from_checkpoint(&ck)?;
        if let Some(prev) = &vocab {
            if vocab_hash(prev) != vocab_hash(&v) {
                return Err(usage("language models were trained with different vocabularies"));
            }
        }
        vocab = Some(v);
        models.push(m);
    }
    let vocab = vocab.ok_or_else(|| usage("at least one --lm checkpoint is required"))?;
    Ok(LmBundle { mode, vocab, models })
}

fn mel_csv(m: &MelSpectrogram) -> String {
    m.frames()
        .map(|f| f.iter().map(f64::to_string).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

fn synth_setup(
    cfg: &RunConfig,
    a: &SynthArgs,
) -> Result<(cofi_codec::Codec, LmBundle, MelSpectrogram, GenerateOptions)> {
    if a.text.trim().is_empty() {
        return Err(usage("--text must not be empty"));
    }
    let codec = load_codec(&a.codec)?;
    let bundle = load_bundle(&a.mode, &a.lm)?;
    if bundle.mode == Mode::Sos && bundle.models.len() != codec.config().scales.num_scales() {
        return Err(usage(format!(
            "sos mode needs {} stage checkpoints",
            codec.config().scales.num_scales()
        )));
    }
    let ref_mel = pipeline::load_audio_mel(&a.reference)?;
    let mut sampler = cfg.sampler.clone();
    if a.greedy {
        sampler = cofi_lm::SamplerConfig {
            seed: sampler.seed,
            ..cofi_lm::SamplerConfig::greedy()
        };
    }
    Ok((
        codec,
        bundle,
        ref_mel,
        GenerateOptions {
            sampler,
            ..Default::default()
        },
    ))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = run_config(common)?;
    match &cli.command {
        Command::ToyCorpus => {
            let dir = out_dir(common)?;
            let mut manifest = String::new();
            for item in harness_cli::toy::toy_corpus() {
                let file = format!("{}.wav", item.name);
                write_wav(&dir.join(&file), &item.audio)?;
                manifest.push_str(&format!("{file}\t{}\n", item.text));
            }
            write(&dir.join("manifest.tsv"), manifest)?;
        }
        Command::TrainCodec { manifest, no_swnd } => {
            let dir = out_dir(common)?;
            let items = pipeline::load_corpus(&Manifest::load(manifest)?)?;
            let mut cfg = cfg.clone();
            if *no_swnd {
                cfg.codec_swnd = None;
            }
            let mut log = Vec::new();
            let codec = pipeline::train_codec(&items, &cfg, &mut log)?;
            write(&dir.join("codec_metrics.csv"), log)?;
            codec_to_checkpoint(&codec)?.save(&dir.join("codec.ckpt"))?;
        }
        Command::BpeTrain {
            manifest,
            codec,
            vocab_size,
        } => {
            let dir = out_dir(common)?;
            let m = Manifest::load(manifest)?;
            let codec = load_codec(codec)?;
            let texts: Vec<String> = m.rows.iter().map(|r| r.text.clone()).collect();
            let v = pipeline::train_vocab(&texts, vocab_size.unwrap_or(cfg.lm_vocab_size), &codec.config().scales)?;
            write(&dir.join("vocab.txt"), v.to_text())?;
        }
        Command::TrainLm {
            manifest,
            codec,
            vocab,
            mode,
            cond_ckpt,
        } => {
            let dir = out_dir(common)?;
            let kind = LmKind::parse(mode)?;
            let text = fs::read_to_string(vocab).with_context(|| format!("reading {}", vocab.display()))?;
            let vocab = Vocabulary::from_text(&text).map_err(HarnessError::from)?;
            let codec = load_codec(codec)?;
            let mut cond = Vec::new();
            for p in cond_ckpt {
                let (m, v) = lm_from_checkpoint(&Checkpoint::load(p)?)?;
                if vocab_hash(&v) != vocab_hash(&vocab) {
                    return Err(usage(format!("{} uses a different vocabulary", p.display())));
                }
                cond.push(m);
            }
            if let LmKind::SosStage(i) = kind {
                if cond.len() != i {
                    return Err(HarnessError::Config(format!(
                        "sos-stage-{i} needs {i} --cond-ckpt checkpoints (coarsest first), got {}",
                        cond.len()
                    ))
                    .into());
                }
            } else if !cond.is_empty() {
                return Err(usage("--cond-ckpt only applies to stack stages"));
            }
            let items = pipeline::load_corpus(&Manifest::load(manifest)?)?;
            let lm_items = pipeline::encode_corpus(&codec, &vocab, &items)?;
            let mut log = Vec::new();
            let (model, acc) = pipeline::train_lm(kind, &vocab, &lm_items, &cond, &cfg, &mut log)?;
            let name = kind.checkpoint_kind();
            write(&dir.join(format!("{name}_metrics.csv")), log)?;
            lm_to_checkpoint(&name, &model, &vocab)?.save(&dir.join(format!("{name}.ckpt")))?;
            println!("{name}: teacher-forced accuracy {acc:.4}");
        }
        Command::Encode { codec, audio } => {
            let out = common.out.clone().ok_or_else(|| usage("--out is required"))?;
            let codec = load_codec(codec)?;
            let mel = pipeline::load_audio_mel(audio)?;
            let (t, g) = codec.encode_to_tokens(&mel)?;
            save_tokens(&out, &t, &g)?;
        }
        Command::Decode { codec, tokens } => {
            let dir = out_dir(common)?;
            let codec = load_codec(codec)?;
            let (t, g) = load_tokens(tokens)?;
            let mel = codec.decode_from_tokens(&t, &g)?;
            write(&dir.join("mel.csv"), mel_csv(&mel))?;
            write_wav(&dir.join("audio.wav"), &griffin_lim(&mel, cfg.griffin_lim_iters))?;
        }
        Command::Synthesize(a) => {
            let (codec, bundle, ref_mel, opts) = synth_setup(&cfg, a)?;
            let dir = out_dir(common)?;
            let reference = Reference {
                mel: &ref_mel,
                text: a.ref_text.as_deref(),
            };
            let s = pipeline::synthesize(&codec, &bundle, &a.text, &reference, &opts)?;
            save_tokens(&dir.join("tokens.coft"), &s.tokens, &s.g)?;
            write(&dir.join("mel.csv"), mel_csv(&s.mel))?;
            if !a.no_wav {
                write_wav(&dir.join("audio.wav"), &griffin_lim(&s.mel, cfg.griffin_lim_iters))?;
            }
            let mut meta = format!(
                "seed={}\nmode={}\ntext={}\nref_text={}\nsampler={:?}\ncodec={} {}\n",
                cfg.seed,
                a.mode,
                a.text,
                a.ref_text.as_deref().unwrap_or(""),
                opts.sampler,
                a.codec.display(),
                pipeline::content_hash(&fs::read(&a.codec)?),
            );
            for p in &a.lm {
                meta.push_str(&format!(
                    "lm={} {}\n",
                    p.display(),
                    pipeline::content_hash(&fs::read(p)?)
                ));
            }
            write(&dir.join("run.txt"), meta)?;
        }
        Command::EvalRecon { manifest, codec } => {
            let out = common.out.clone().ok_or_else(|| usage("--out is required"))?;
            let codec = load_codec(codec)?;
            let items = pipeline::load_corpus(&Manifest::load(manifest)?)?;
            let rows = pipeline::eval_recon(&codec, &items)?;
            write(&out, pipeline::recon_csv(&rows))?;
        }
        Command::EvalAblation { manifest, codec } => {
            let out = common.out.clone().ok_or_else(|| usage("--out is required"))?;
            let items = pipeline::load_corpus(&Manifest::load(manifest)?)?;
            let mut blocks = Vec::new();
            for p in codec {
                let c = load_codec(p)?;
                blocks.push((p.display().to_string(), pipeline::eval_ablation(&c, &items)?));
            }
            let labelled: Vec<(&str, Vec<Vec<f64>>)> = blocks.iter().map(|(l, r)| (l.as_str(), r.clone())).collect();
            write(&out, pipeline::ablation_csv(&labelled, &items))?;
        }
        Command::AttnDump(a) => {
            let (codec, bundle, ref_mel, opts) = synth_setup(&cfg, a)?;
            let dir = out_dir(common)?;
            let reference = Reference {
                mel: &ref_mel,
                text: a.ref_text.as_deref(),
            };
            let prompt = pipeline::build_prompt(&codec, &bundle.vocab, &a.text, &reference)?;
            let tokens = pipeline::generate(&bundle, &codec.config().scales, &prompt, &opts)?;
            let maps = pipeline::attention_maps(&bundle, &prompt.text_ids, &tokens, &prompt.g)?;
            for (i, m) in maps.iter().enumerate() {
                write(&dir.join(format!("attn_{i}.pgm")), pipeline::pgm_bytes(m))?;
                write(&dir.join(format!("attn_{i}.csv")), pipeline::map_csv(m))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<HarnessError>().map_or(2, HarnessError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
