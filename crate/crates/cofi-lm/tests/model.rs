use cofi_codec::{GlobalEmbedding, MultiScaleTokens, ScaleSpec, TokenGrid};
use cofi_lm::{
    attention_aggregate, build_icl_prompt, generate_cos, generate_sos, teacher_forced_accuracy, Additive,
    GenerateOptions, LmConfig, LmError, LmInput, LmModel, LmTrainConfig, LmTrainer, SamplerConfig, Vocabulary,
    ATTN_CLIP,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor_core::{AttnMap, Tensor};

fn config(vocab: usize, streams: usize, g_dim: usize, cond_dim: usize) -> LmConfig {
    LmConfig {
        vocab_size: vocab,
        dim: 16,
        layers: 2,
        heads: 2,
        max_len: 128,
        streams,
        g_dim,
        cond_dim,
    }
}

fn spec() -> ScaleSpec {
    ScaleSpec {
        frameshift_ms: vec![120, 40, 20],
        num_streams: vec![1, 1, 4],
        codebook_size: vec![5, 5, 5],
        latent_dim: 4,
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::new(Vec::new(), vec![5, 5, 5]).unwrap()
}

#[test]
fn causal_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = LmModel::new(config(40, 2, 3, 6), &mut rng).unwrap();
    let tokens: Vec<Vec<u32>> = (0..12).map(|i| vec![i % 40, (3 * i + 1) % 40]).collect();
    let base = LmInput {
        g: Some(vec![0.2, -0.1, 0.4]),
        cond: Some(Tensor::uniform(vec![3, 6], 1.0, &mut rng)),
        additive: Some(Additive {
            start: 1,
            len: 9,
            factor: 3,
        }),
        tokens,
    };
    let a = m.forward(&base).unwrap();
    assert_eq!(a.hidden.len(), 12);
    for t in [0usize, 4, 11] {
        let mut changed = base.clone();
        changed.tokens[t] = vec![39, 38];
        let b = m.forward(&changed).unwrap();
        for head in 0..2 {
            for p in 0..t {
                assert_eq!(
                    a.logits[head].row(p),
                    b.logits[head].row(p),
                    "position {p} saw token {t}"
                );
            }
            assert_ne!(a.logits[head].row(t), b.logits[head].row(t));
        }
    }
}

#[test]
fn capacity_and_shape_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = LmModel::new(config(10, 1, 0, 0), &mut rng).unwrap();
    let long = LmInput {
        tokens: vec![vec![1]; 129],
        ..Default::default()
    };
    assert!(matches!(
        m.forward(&long),
        Err(LmError::Capacity { len: 129, max: 128 })
    ));
    let wide = LmInput {
        tokens: vec![vec![1, 2]],
        ..Default::default()
    };
    assert!(m.forward(&wide).is_err());
    let with_g = LmInput {
        g: Some(vec![1.0]),
        tokens: vec![vec![1]],
        ..Default::default()
    };
    assert!(m.forward(&with_g).is_err());
    let bad = LmConfig {
        heads: 3,
        ..config(10, 1, 0, 0)
    };
    assert!(LmModel::new(bad, &mut rng).is_err());
}

#[test]
fn raw_attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = LmModel::new(config(20, 1, 2, 0), &mut rng).unwrap();
    let input = LmInput {
        g: Some(vec![1.0, -1.0]),
        tokens: (0..7).map(|i| vec![i]).collect(),
        ..Default::default()
    };
    let out = m.forward(&input).unwrap();
    assert_eq!(out.attn.len(), 2);
    for map in out.attn.iter().flatten() {
        assert_eq!(map.probs.shape(), &[8, 8]);
        for i in 0..8 {
            let row = map.probs.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
    let agg = attention_aggregate(&out.attn).unwrap();
    assert!(agg.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn aggregation_arithmetic() {
    let four = AttnMap {
        probs: Tensor::filled(vec![3, 3], 4.0),
    };
    let out = attention_aggregate(&[vec![four]]).unwrap();
    assert!(out.data().iter().all(|&v| v == 1.0));
    let zero = AttnMap {
        probs: Tensor::zeros(vec![2, 2]),
    };
    let out = attention_aggregate(&[vec![zero.clone(), zero.clone()], vec![zero.clone()]]).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
    let other = AttnMap {
        probs: Tensor::zeros(vec![3, 3]),
    };
    assert!(attention_aggregate(&[vec![zero, other]]).is_err());
    assert!(attention_aggregate(&[]).is_err());
}

proptest! {
    #[test]
    fn aggregation_is_clipped(vals in proptest::collection::vec(0.0f64..3.0, 1..5 * 9)) {
        let maps: Vec<AttnMap> = vals
            .chunks(9)
            .filter(|c| c.len() == 9)
            .map(|c| AttnMap { probs: Tensor::new(vec![3, 3], c.to_vec()).unwrap() })
            .collect();
        prop_assume!(!maps.is_empty());
        let out = attention_aggregate(&[maps]).unwrap();
        prop_assert!(out.data().iter().all(|&v| (0.0..=ATTN_CLIP).contains(&v)));
    }
}

fn reference() -> MultiScaleTokens {
    let grids = vec![
        TokenGrid::new(1, 1, vec![2]).unwrap(),
        TokenGrid::new(3, 1, vec![1, 0, 4]).unwrap(),
        TokenGrid::new(6, 4, (0..24).map(|i| i % 5).collect()).unwrap(),
    ];
    MultiScaleTokens::new(grids, spec(), 12).unwrap()
}

fn stack(rng: &mut ChaCha8Rng) -> Vec<LmModel> {
    let v = vocab().size();
    vec![
        LmModel::new(config(v, 1, 4, 0), rng).unwrap(),
        LmModel::new(config(v, 1, 0, 16), rng).unwrap(),
        LmModel::new(config(v, 4, 0, 16), rng).unwrap(),
    ]
}

#[test]
fn icl_prompt_text_and_cursor() {
    let g = GlobalEmbedding { g: vec![0.0; 4] };
    let plain = build_icl_prompt(None, &[1, 1, 4], &[], &[5, 6], g.clone()).unwrap();
    assert_eq!(plain.text_ids, vec![5, 6]);
    assert!(!plain.has_reference());
    let r = reference();
    let p = build_icl_prompt(Some(&r), &[1, 1, 4], &[1, 2, 3], &[5, 6], g.clone()).unwrap();
    assert_eq!(p.text_ids.len(), 5);
    assert_eq!(p.cursors(), vec![1, 3, 6]);
    assert!(build_icl_prompt(Some(&r), &[1, 4], &[], &[], g).is_err());
}

#[test]
fn stack_generation_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let models = stack(&mut rng);
    let v = vocab();
    let g = GlobalEmbedding { g: vec![0.3; 4] };
    let r = reference();
    let prompt = build_icl_prompt(Some(&r), &[1, 1, 4], &[65], &[66, 67], g).unwrap();
    let opts = GenerateOptions {
        sampler: SamplerConfig::greedy(),
        max_coarse_frames: 4,
        zero_condition: false,
    };
    let out = generate_sos(&models, &v, &spec(), &prompt, &opts).unwrap();
    let t0 = out.grids[0].frames;
    assert_eq!(out.grids[1].frames, 3 * t0);
    assert_eq!(out.grids[2].frames, 6 * t0);
    for (i, grid) in out.grids.iter().enumerate() {
        let n = r.grids[i].data.len();
        assert_eq!(&grid.data[..n], &r.grids[i].data[..], "scale {i} reference overwritten");
    }
    let again = generate_sos(&models, &v, &spec(), &prompt, &opts).unwrap();
    assert_eq!(out, again);
    let ablated = GenerateOptions {
        zero_condition: true,
        ..opts
    };
    let z = generate_sos(&models, &v, &spec(), &prompt, &ablated).unwrap();
    assert_eq!(z.grids[0], out.grids[0], "coarsest stage does not see the conditioning");
    assert_eq!(z.grids[2].frames, out.grids[2].frames);
}

fn tiny_corpus() -> Vec<(Vec<u32>, MultiScaleTokens)> {
    let s = spec();
    (0..3u32)
        .map(|k| {
            let t0 = 1 + k as usize % 2;
            let grids = vec![
                TokenGrid::new(t0, 1, (0..t0 as u32).map(|i| (i + k) % 5).collect()).unwrap(),
                TokenGrid::new(3 * t0, 1, (0..3 * t0 as u32).map(|i| (2 * i + k) % 5).collect()).unwrap(),
                TokenGrid::new(6 * t0, 4, (0..24 * t0 as u32).map(|i| (i / 3 + k) % 5).collect()).unwrap(),
            ];
            (
                vec![97 + k, 98 + k],
                MultiScaleTokens::new(grids, s.clone(), 12 * t0).unwrap(),
            )
        })
        .collect()
}

#[test]
fn chain_model_memorizes_tiny_corpus() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = vocab();
    let corpus = tiny_corpus();
    let g = vec![0.5, -0.5, 0.25, 0.0];
    let examples: Vec<_> = corpus
        .iter()
        .map(|(text, tok)| cofi_lm::cos_example(&v, text, tok, &g).unwrap())
        .collect();
    let mut cfg = config(v.size(), 4, 4, 0);
    cfg.dim = 32;
    let mut model = LmModel::new(cfg, &mut rng).unwrap();
    let steps = 300;
    let mut trainer = LmTrainer::new(LmTrainConfig {
        steps,
        lr_start: 3e-3,
        lr_end: 3e-4,
        ..Default::default()
    });
    let first = trainer.step(&mut model, &examples).unwrap().loss;
    let mut last = first;
    for _ in 1..steps {
        last = trainer.step(&mut model, &examples).unwrap().loss;
    }
    assert!(last < first * 0.1, "loss {first} -> {last}");
    let acc = teacher_forced_accuracy(&model, &examples).unwrap();
    assert!(acc > 0.95, "accuracy {acc}");
    let opts = GenerateOptions {
        sampler: SamplerConfig::greedy(),
        ..Default::default()
    };
    for (text, tok) in &corpus {
        let prompt = build_icl_prompt(None, &[1, 1, 4], &[], text, GlobalEmbedding { g: g.clone() }).unwrap();
        let out = generate_cos(&model, &v, &spec(), &prompt, &opts).unwrap();
        assert_eq!(&out, tok);
    }
}

mod sampling {
    use cofi_lm::{sample_next, SamplerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_k_one_ignores_seed() {
        let l = [0.3, -1.0, 2.5, 2.4];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SamplerConfig {
                top_k: 1,
                seed,
                ..Default::default()
            };
            assert_eq!(sample_next(&l, &[], &cfg, &mut rng).unwrap(), 2);
        }
    }

    #[test]
    fn penalty_changes_the_argmax() {
        let l = [2.0, 1.5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SamplerConfig {
            top_k: 1,
            repetition_penalty: 2.0,
            ..Default::default()
        };
        assert_eq!(sample_next(&l, &[0], &cfg, &mut rng).unwrap(), 1);
    }

    #[test]
    fn plain_sampling_matches_softmax() {
        let logits = [1.0, 0.0, -0.5, 2.0, 0.3];
        let temperature = 0.7;
        let cfg = SamplerConfig {
            top_p: 1.0,
            top_k: logits.len(),
            repetition_penalty: 1.0,
            temperature,
            seed: 11,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[sample_next(&logits, &[0, 3], &cfg, &mut rng).unwrap() as usize] += 1;
        }
        let z: f64 = logits.iter().map(|l| (l / temperature).exp()).sum();
        let mut tv = 0.0;
        for (c, l) in counts.iter().zip(logits) {
            let p = (l / temperature).exp() / z;
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() < 0.01, "{f} vs {p}");
            tv += 0.5 * (f - p).abs();
        }
        assert!(tv < 0.02, "total variation {tv}");
    }

    #[test]
    fn nucleus_then_temperature() {
        // untempered probabilities ~ [0.64, 0.24, 0.09, 0.03]: top_p 0.8 keeps two
        let logits = [2.0f64, 1.0, 0.0, -1.0];
        let cfg = SamplerConfig {
            top_p: 0.8,
            top_k: 4,
            repetition_penalty: 1.0,
            temperature: 2.0,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 20_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_next(&logits, &[], &cfg, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[2] + counts[3], 0);
        let p0 = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((counts[0] as f64 / n as f64 - p0).abs() < 0.015);
    }
}
