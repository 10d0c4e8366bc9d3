use std::path::Path;
use std::process::{Command, Output};

use cofi_codec::{Codec, CodecConfig, ScaleSpec};
use cofi_lm::{bpe_train, LmConfig, LmModel, Vocabulary};
use harness_cli::checkpoint::{codec_to_checkpoint, lm_to_checkpoint};
use harness_cli::manifest::Manifest;
use harness_cli::pipeline::{load_audio_mel, load_corpus};
use harness_cli::tokenfile::load_tokens;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cofi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cofi")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Toy corpus plus an untrained but initialized codec checkpoint.
fn setup(dir: &Path) -> std::path::PathBuf {
    let toy = dir.join("toy");
    assert_eq!(code(&cofi(&["toy-corpus", "--out", s(&toy)])), 0);
    let items = load_corpus(&Manifest::load(&toy.join("manifest.tsv")).unwrap()).unwrap();
    let mels: Vec<_> = items.iter().map(|u| u.mel.clone()).collect();
    let mut cfg = CodecConfig::with_scales(ScaleSpec::canonical(8, 8), 1, 0);
    cfg.scales.num_streams = vec![1, 1, 2];
    let mut codec = Codec::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    codec.fit_normalization(&mels).unwrap();
    codec.init_codebooks(&mels, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    codec_to_checkpoint(&codec)
        .unwrap()
        .save(&dir.join("codec.ckpt"))
        .unwrap();
    toy
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&cofi(&[])), 1);
    assert_eq!(code(&cofi(&["bogus"])), 1);
    assert_eq!(code(&cofi(&["--help"])), 0);
    assert_eq!(code(&cofi(&["train-codec"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let out = cofi(&[
        "train-lm",
        "--manifest",
        "m",
        "--codec",
        "c",
        "--vocab",
        "v",
        "--mode",
        "chain",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown LM mode"));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no.such.key = 3\n").unwrap();
    assert_eq!(
        code(&cofi(&["toy-corpus", "--config", s(&cfg), "--out", s(dir.path())])),
        1
    );
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = cofi(&[
        "encode",
        "--codec",
        s(&missing),
        "--audio",
        "x.wav",
        "--out",
        s(&dir.path().join("t")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = cofi(&[
        "encode",
        "--codec",
        s(&garbage),
        "--audio",
        "x.wav",
        "--out",
        s(&dir.path().join("t")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn encode_decode_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let toy = setup(dir.path());
    let manifest = Manifest::load(&toy.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.rows.len(), 10);
    assert!(manifest.rows.iter().all(|r| r.audio.exists()));

    let codec = dir.path().join("codec.ckpt");
    let wav = toy.join("toy_03.wav");
    let tokens = dir.path().join("t.coft");
    assert_eq!(
        code(&cofi(&[
            "encode",
            "--codec",
            s(&codec),
            "--audio",
            s(&wav),
            "--out",
            s(&tokens)
        ])),
        0
    );
    let (t, g) = load_tokens(&tokens).unwrap();
    let frames = load_audio_mel(&wav).unwrap().n_frames();
    assert_eq!(t.grids[0].frames, frames.div_ceil(12));
    assert_eq!(g.g.len(), 8);

    let dec = dir.path().join("dec");
    let cfg_path = dir.path().join("gl.cfg");
    std::fs::write(&cfg_path, "synth.griffin_lim_iters = 2\n").unwrap();
    let out = cofi(&[
        "decode",
        "--codec",
        s(&codec),
        "--tokens",
        s(&tokens),
        "--config",
        s(&cfg_path),
        "--out",
        s(&dec),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mel_csv = std::fs::read_to_string(dec.join("mel.csv")).unwrap();
    assert_eq!(mel_csv.lines().count(), t.grids[0].frames * 12);
    assert!(dec.join("audio.wav").exists());

    let recon = dir.path().join("recon.csv");
    let m = toy.join("manifest.tsv");
    assert_eq!(
        code(&cofi(&[
            "eval-recon",
            "--manifest",
            s(&m),
            "--codec",
            s(&codec),
            "--out",
            s(&recon)
        ])),
        0
    );
    let text = std::fs::read_to_string(&recon).unwrap();
    assert_eq!(text.lines().count(), 12, "{text}");
    assert!(text.lines().last().unwrap().starts_with("mean"));

    let abl = dir.path().join("ablation.csv");
    let out = cofi(&[
        "eval-ablation",
        "--manifest",
        s(&m),
        "--codec",
        s(&codec),
        "--codec",
        s(&codec),
        "--out",
        s(&abl),
    ]);
    assert_eq!(code(&out), 0);
}

#[test]
fn synthesize_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let toy = setup(dir.path());
    let vocab = Vocabulary::new(bpe_train(&["a bad cafe"], 258).unwrap(), vec![8, 8, 8]).unwrap();
    let cfg = LmConfig {
        vocab_size: vocab.size(),
        dim: 16,
        layers: 1,
        heads: 2,
        max_len: 64,
        streams: 2,
        g_dim: 8,
        cond_dim: 0,
    };
    let lm = LmModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let lm_path = dir.path().join("lm-cos.ckpt");
    lm_to_checkpoint("lm-cos", &lm, &vocab).unwrap().save(&lm_path).unwrap();
    let codec = dir.path().join("codec.ckpt");
    let wav = toy.join("toy_00.wav");
    let base = [
        "synthesize",
        "--codec",
        s(&codec),
        "--lm",
        s(&lm_path),
        "--ref",
        s(&wav),
    ];
    let out_dir = dir.path().join("o");

    let mut args = base.to_vec();
    args.extend(["--mode", "cos", "--text", "  ", "--out", s(&out_dir)]);
    let out = cofi(&args);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out_dir.exists());

    let mut args = base.to_vec();
    args.extend(["--mode", "sos", "--text", "abc", "--out", s(&out_dir)]);
    assert_eq!(code(&cofi(&args)), 1);
}
