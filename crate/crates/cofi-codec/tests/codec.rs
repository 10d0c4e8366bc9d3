use cofi_codec::{swnd_sample, Codec, CodecConfig, CodecTrainer, GlobalEmbedding, ScaleSpec, SwndConfig, TrainConfig};
use dsp_frontend::{MelSpectrogram, N_MELS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor_core::Tensor;

fn tiny_config() -> CodecConfig {
    let mut cfg = CodecConfig::with_scales(ScaleSpec::canonical(8, 8), 1, 0);
    cfg.scales.num_streams = vec![1, 1, 2];
    cfg
}

fn tiny_codec(seed: u64) -> Codec {
    Codec::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_mel(frames: usize, seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..frames * N_MELS).map(|_| rng.gen_range(-8.0..2.0)).collect();
    MelSpectrogram::from_flat(data).unwrap()
}

fn initialized_codec(seed: u64, mels: &[MelSpectrogram]) -> Codec {
    let mut codec = tiny_codec(seed);
    codec.fit_normalization(mels).unwrap();
    codec
        .init_codebooks(mels, &mut ChaCha8Rng::seed_from_u64(seed + 1))
        .unwrap();
    codec
}

#[test]
fn canonical_lengths_for_600_frames() {
    let codec = tiny_codec(0);
    let enc = codec.encode_scales(&random_mel(600, 1)).unwrap();
    let lens: Vec<usize> = enc.iter().map(Tensor::rows).collect();
    assert_eq!(lens, vec![50, 150, 300]);
    assert!(enc.iter().all(|e| e.cols() == 8));
    let spec = &codec.config().scales;
    assert_eq!(spec.hop_frames(), vec![12, 4, 2]);
}

#[test]
fn scale_ratios_on_random_lengths() {
    let codec = tiny_codec(0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50 {
        let frames = rng.gen_range(1..160);
        let enc = codec.encode_scales(&random_mel(frames, case)).unwrap();
        let t: Vec<usize> = enc.iter().map(Tensor::rows).collect();
        assert_eq!(t[1], 3 * t[0], "frames {frames}");
        assert_eq!(t[2], 6 * t[0], "frames {frames}");
        assert_eq!(t[0], frames.div_ceil(12));
    }
}

#[test]
fn doubling_input_doubles_lengths() {
    let codec = tiny_codec(0);
    let m = random_mel(36, 4);
    let mut twice = m.as_flat().to_vec();
    twice.extend_from_slice(m.as_flat());
    let a = codec.encode_scales(&m).unwrap();
    let b = codec.encode_scales(&MelSpectrogram::from_flat(twice).unwrap()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(2 * x.rows(), y.rows());
    }
}

#[test]
fn reference_embedding_pooling() {
    let mut cfg = tiny_config();
    cfg.ref_kernel = 1;
    let codec = Codec::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let m = random_mel(23, 6);
    let base = codec.reference_embed(&m).unwrap();

    let mut order: Vec<usize> = (0..23).collect();
    order.reverse();
    order.swap(3, 17);
    let shuffled: Vec<Vec<f64>> = order.iter().map(|&t| m.frame(t).to_vec()).collect();
    let s = codec
        .reference_embed(&MelSpectrogram::from_frames(&shuffled).unwrap())
        .unwrap();
    for (a, b) in base.g.iter().zip(&s.g) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut twice = m.as_flat().to_vec();
    twice.extend_from_slice(m.as_flat());
    let c = codec
        .reference_embed(&MelSpectrogram::from_flat(twice).unwrap())
        .unwrap();
    for (a, b) in base.g.iter().zip(&c.g) {
        assert!((a - b).abs() < 1e-6);
    }

    let zeros = MelSpectrogram::from_flat(vec![0.0; 10 * N_MELS]).unwrap();
    let z1 = codec.reference_embed(&zeros).unwrap();
    let z2 = codec.reference_embed(&zeros).unwrap();
    assert_eq!(z1, z2);
    assert!(z1.g.iter().all(|v| v.is_finite()));
}

#[test]
fn decode_step_residual_algebra() {
    let mels = vec![random_mel(24, 7)];
    let codec = initialized_codec(8, &mels);
    let enc = codec.encode_scales(&mels[0]).unwrap();
    let zero_g = GlobalEmbedding { g: vec![0.0; 8] };
    for (i, e) in enc.iter().enumerate() {
        let d = Tensor::zeros(e.shape().to_vec());
        let out = codec.decode_step(i, e, &d, &zero_g, false).unwrap();
        assert_eq!(&out.residual, e);
        let stride = codec.config().scales.up_stride(i);
        assert_eq!(out.next.rows(), e.rows() * stride);
        assert!(out.quant.is_some());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = GlobalEmbedding {
        g: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    for (i, e) in enc.iter().enumerate() {
        let d = Tensor::uniform(e.shape().to_vec(), 1.0, &mut rng);
        let out = codec.decode_step(i, e, &d, &g, true).unwrap();
        for t in 0..e.rows() {
            for c in 0..8 {
                let expect = e.row(t)[c] + g.g[c];
                assert!((out.fused.row(t)[c] - expect).abs() < 1e-12);
            }
        }
    }

    let e = &enc[0];
    let bad = Tensor::zeros(vec![e.rows() + 1, 8]);
    assert!(codec.decode_step(0, e, &bad, &g, false).is_err());
}

#[test]
fn swnd_distribution() {
    let cfg = SwndConfig::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[swnd_sample(&cfg, &mut rng)] += 1;
    }
    assert_eq!(counts[3], 0);
    let mut chi2 = 0.0;
    for (c, p) in counts.iter().zip(&cfg.probs) {
        let freq = *c as f64 / draws as f64;
        assert!((freq - p).abs() < 0.01);
        let expected = p * draws as f64;
        chi2 += (*c as f64 - expected).powi(2) / expected;
    }
    // chi-square critical value, 2 degrees of freedom, alpha 0.01
    assert!(chi2 < 9.210, "chi2 {chi2}");

    let always = SwndConfig::new(vec![1.0, 0.0, 0.0]).unwrap();
    assert!((0..1000).all(|_| swnd_sample(&always, &mut rng) == 0));
}

#[test]
fn untrained_loss_is_finite_and_composes() {
    let mels = vec![random_mel(30, 11)];
    let codec = initialized_codec(12, &mels);
    let (recon, tokens, loss) = codec.codec_forward(&mels[0], 0, None).unwrap();
    assert_eq!(recon.n_frames(), 30);
    assert_eq!(tokens.source_frames, 30);
    assert!(loss.total.is_finite() && loss.total > 0.0);
    assert!((loss.total - loss.recomputed_total()).abs() < 1e-9);
    assert_eq!(loss.l_adv, 0.0);
    assert_eq!((loss.lambda_vq, loss.lambda_reg, loss.lambda_adv), (1.0, 1.0, 0.1));
}

#[test]
fn masked_scale_accounting() {
    let mels = vec![random_mel(24, 13)];
    let codec = initialized_codec(14, &mels);
    let n = codec.config().scales.num_scales();
    let (_, _, loss) = codec.codec_forward(&mels[0], n - 1, None).unwrap();
    let enc = codec.encode_scales(&mels[0]).unwrap();
    let g = codec.reference_embed(&mels[0]).unwrap();
    let coarse = codec
        .decode_step(0, &enc[0], &Tensor::zeros(enc[0].shape().to_vec()), &g, false)
        .unwrap();
    assert!((loss.l_vq - coarse.quant.unwrap().vq_loss).abs() < 1e-9);
    assert!(codec.codec_forward(&mels[0], n, None).is_err());
}

#[test]
fn masked_scales_receive_no_gradient() {
    // more coarse frames than codewords, so commitment terms are nonzero
    let mels = vec![random_mel(144, 15)];
    let codec = initialized_codec(16, &mels);
    for b in 0..3 {
        let grads = codec.encoding_gradients(&mels[0], b).unwrap();
        for (i, gr) in grads.iter().enumerate() {
            let norm: f64 = gr.data().iter().map(|v| v * v).sum();
            if i >= 3 - b {
                assert_eq!(norm, 0.0, "b={b} scale {i}");
            } else {
                assert!(norm > 0.0, "b={b} scale {i}");
            }
        }
    }
}

#[test]
fn token_round_trip_contracts() {
    let mels = vec![random_mel(30, 17), random_mel(30, 18)];
    let codec = initialized_codec(19, &mels);
    let (t1, g1) = codec.encode_to_tokens(&mels[0]).unwrap();
    let (t1b, g1b) = codec.encode_to_tokens(&mels[0]).unwrap();
    assert_eq!(t1, t1b);
    assert_eq!(g1, g1b);
    let shapes: Vec<(usize, usize)> = t1.grids.iter().map(|g| (g.frames, g.streams)).collect();
    assert_eq!(shapes, vec![(3, 1), (9, 1), (18, 2)]);

    let a = codec.decode_from_tokens(&t1, &g1).unwrap();
    let b = codec.decode_from_tokens(&t1, &g1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n_frames(), 30);
    assert_eq!(codec.reconstruct_top_b(&t1, &g1, 3).unwrap(), a);
    assert!(codec.reconstruct_top_b(&t1, &g1, 0).is_err());
    assert!(codec.reconstruct_top_b(&t1, &g1, 4).is_err());

    let (_, g2) = codec.encode_to_tokens(&mels[1]).unwrap();
    let c = codec.decode_from_tokens(&t1, &g2).unwrap();
    let diff: f64 = a.as_flat().iter().zip(c.as_flat()).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 0.0);

    let mut bad = t1.clone();
    bad.grids[0].data[0] = 8;
    assert!(codec.decode_from_tokens(&bad, &g1).is_err());
}

#[test]
fn keep_one_uses_only_coarsest_tokens() {
    let mels = vec![random_mel(24, 20)];
    let codec = initialized_codec(21, &mels);
    let (t, g) = codec.encode_to_tokens(&mels[0]).unwrap();
    let base = codec.reconstruct_top_b(&t, &g, 1).unwrap();
    let mut altered = t.clone();
    for grid in &mut altered.grids[1..] {
        grid.data.iter_mut().for_each(|v| *v = (*v + 1) % 8);
    }
    assert_eq!(codec.reconstruct_top_b(&altered, &g, 1).unwrap(), base);
    assert_ne!(
        codec.reconstruct_top_b(&altered, &g, 2).unwrap(),
        codec.reconstruct_top_b(&t, &g, 2).unwrap()
    );
}

#[test]
fn training_reduces_loss() {
    let mels = vec![random_mel(24, 22), random_mel(36, 23)];
    let mut codec = tiny_codec(24);
    codec.fit_normalization(&mels).unwrap();
    let mut trainer = CodecTrainer::new(TrainConfig {
        steps: 60,
        lr_start: 3e-3,
        lr_end: 1e-3,
        ..TrainConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let first = trainer.step(&mut codec, &mels, &mut rng).unwrap();
    let mut last = first.clone();
    for _ in 1..60 {
        last = trainer.step(&mut codec, &mels, &mut rng).unwrap();
    }
    assert!(last.l_reg < first.l_reg, "{} !< {}", last.l_reg, first.l_reg);
    assert!(codec.quantizers().iter().all(|q| q.is_initialized()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn lengths_follow_frameshift_arithmetic(frames in 1usize..400) {
        let spec = ScaleSpec::canonical(4, 4);
        let lens = spec.scale_lengths(frames);
        for i in 1..lens.len() {
            let ratio = spec.frameshift_ms[i - 1] / spec.frameshift_ms[i];
            prop_assert_eq!(lens[i], lens[i - 1] * ratio);
        }
        prop_assert_eq!(lens[0] * 12, spec.padded_frames(frames));
        prop_assert!(spec.padded_frames(frames) >= frames && spec.padded_frames(frames) < frames + 12);
    }
}
