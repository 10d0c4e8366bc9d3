use proptest::prelude::*;
use quantizers::{
    ema_update, opq_quantize, pq_quantize, rq_quantize, sample_stream_drop, vq_quantize, Codebook, QuantMode,
    Quantizer, QuantizerConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor_core::{Graph, Tensor};

fn book(size: usize, dim: usize, data: Vec<f64>) -> Codebook {
    Codebook::from_codewords(size, dim, data, 0.99).unwrap()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Brute-force best squared distance from `v` to any codeword.
fn brute_best(cb: &Codebook, v: &[f64]) -> f64 {
    (0..cb.size())
        .map(|k| sq(cb.codeword(k), v))
        .fold(f64::INFINITY, f64::min)
}

fn frames_strategy(t: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, t * d).prop_map(move |v| Tensor::new(vec![t, d], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vq_is_optimal(x in frames_strategy(6, 3), cw in prop::collection::vec(-3.0f64..3.0, 5 * 3)) {
        let cb = book(5, 3, cw);
        let r = vq_quantize(&x, &cb).unwrap();
        for t in 0..6 {
            let chosen = sq(cb.codeword(r.indices[t]), x.row(t));
            for k in 0..5 {
                prop_assert!(chosen <= sq(cb.codeword(k), x.row(t)));
            }
        }
        let expect: f64 = (0..6).map(|t| brute_best(&cb, x.row(t))).sum::<f64>() / 6.0;
        prop_assert!((r.vq_loss - expect).abs() < 1e-12);
    }

    #[test]
    fn pq_equals_sum_of_subspace_vq(
        x in frames_strategy(5, 4),
        a in prop::collection::vec(-3.0f64..3.0, 4 * 2),
        b in prop::collection::vec(-3.0f64..3.0, 3 * 2),
    ) {
        let cbs = vec![book(4, 2, a), book(3, 2, b)];
        let r = pq_quantize(&x, &cbs).unwrap();
        let oracle: f64 = (0..5)
            .map(|t| brute_best(&cbs[0], &x.row(t)[..2]) + brute_best(&cbs[1], &x.row(t)[2..]))
            .sum::<f64>() / 5.0;
        prop_assert!((r.vq_loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn pq_single_stream_is_vq(x in frames_strategy(4, 3), cw in prop::collection::vec(-3.0f64..3.0, 4 * 3)) {
        let cb = book(4, 3, cw);
        prop_assert_eq!(pq_quantize(&x, std::slice::from_ref(&cb)).unwrap(), vq_quantize(&x, &cb).unwrap());
        prop_assert_eq!(rq_quantize(&x, std::slice::from_ref(&cb)).unwrap(), vq_quantize(&x, &cb).unwrap());
    }

    #[test]
    fn pq_commutes_with_frame_permutation(x in frames_strategy(6, 4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cbs = vec![
            book(3, 2, (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()),
            book(3, 2, (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()),
        ];
        let mut perm: Vec<usize> = (0..6).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| x.row(p).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let r = pq_quantize(&x, &cbs).unwrap();
        let rp = pq_quantize(&xp, &cbs).unwrap();
        for (t, &p) in perm.iter().enumerate() {
            prop_assert_eq!(rp.frame_indices(t), r.frame_indices(p));
        }
    }

    #[test]
    fn rq_residual_norm_non_increasing(
        x in frames_strategy(5, 2),
        books in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3 * 2), 1..5),
    ) {
        // every stage also contains the zero vector
        let cbs: Vec<Codebook> = books
            .into_iter()
            .map(|mut v| {
                v.extend([0.0, 0.0]);
                book(4, 2, v)
            })
            .collect();
        let mut prev = f64::INFINITY;
        for s in 1..=cbs.len() {
            let loss = rq_quantize(&x, &cbs[..s]).unwrap().vq_loss;
            prop_assert!(loss <= prev + 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn rq_sum_of_codewords_is_exact(picks in prop::collection::vec(0usize..3, 3)) {
        // stages at well-separated magnitudes so greedy recovers the picks
        let cbs: Vec<Codebook> = (0..3)
            .map(|s| {
                let m = 100f64.powi(2 - s);
                book(3, 2, vec![0.0, 0.0, m, 0.0, 0.0, m])
            })
            .collect();
        let mut target = [0.0, 0.0];
        for (s, &k) in picks.iter().enumerate() {
            for (t, c) in target.iter_mut().zip(cbs[s].codeword(k)) {
                *t += c;
            }
        }
        let x = Tensor::from_rows(&[target.to_vec()]).unwrap();
        let r = rq_quantize(&x, &cbs).unwrap();
        prop_assert_eq!(r.vq_loss, 0.0);
        prop_assert_eq!(r.indices, picks);
    }

    #[test]
    fn ema_scale_invariance(c in 0.1f64..10.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|t| {
                let centre = if t % 2 == 0 { 2.0 } else { -2.0 };
                vec![centre + rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]
            })
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let scaled = Tensor::new(vec![12, 2], x.data().iter().map(|v| v * c).collect()).unwrap();
        let init = vec![1.0, 0.0, -1.0, 0.0];
        let mut a = book(2, 2, init.clone());
        let mut b = book(2, 2, init.iter().map(|v| v * c).collect());
        for _ in 0..100 {
            let ra = vq_quantize(&x, &a).unwrap();
            ema_update(&mut a, &x, &ra.indices).unwrap();
            let rb = vq_quantize(&scaled, &b).unwrap();
            ema_update(&mut b, &scaled, &rb.indices).unwrap();
        }
        for (va, vb) in a.codewords().iter().zip(b.codewords()) {
            prop_assert!((va * c - vb).abs() <= 1e-9 * (1.0 + vb.abs()));
        }
    }
}

#[test]
fn opq_degenerate_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::uniform(vec![7, 6], 1.0, &mut rng);
    let cbs: Vec<Codebook> = (0..3)
        .map(|_| book(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let keep_all = opq_quantize(&x, &cbs, &[0.0, 0.0, 0.0, 1.0], Some(&mut rng)).unwrap();
    assert_eq!(keep_all, pq_quantize(&x, &cbs).unwrap());

    let none = opq_quantize(&x, &cbs, &[1.0, 0.0, 0.0, 0.0], Some(&mut rng)).unwrap();
    assert!(none.quantized.data().iter().all(|&v| v == 0.0));
    assert_eq!(none.kept_streams, 0);

    let inference = opq_quantize::<ChaCha8Rng>(&x, &cbs, &[1.0, 0.0, 0.0, 0.0], None).unwrap();
    assert_eq!(inference, pq_quantize(&x, &cbs).unwrap());
}

#[test]
fn opq_mask_frequencies_match_configuration() {
    let probs = [0.05, 0.15, 0.3, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[sample_stream_drop(&probs, &mut rng)] += 1;
    }
    for (c, p) in counts.iter().zip(probs) {
        let freq = *c as f64 / draws as f64;
        assert!((freq - p).abs() < 0.01, "frequency {freq} vs {p}");
    }
}

#[test]
fn opq_masks_a_stream_suffix() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::uniform(vec![3, 4], 1.0, &mut rng);
    let cbs: Vec<Codebook> = (0..4).map(|_| book(2, 1, vec![0.5, -0.5])).collect();
    let full = pq_quantize(&x, &cbs).unwrap();
    for _ in 0..50 {
        let r = opq_quantize(&x, &cbs, &[0.2, 0.2, 0.2, 0.2, 0.2], Some(&mut rng)).unwrap();
        for t in 0..3 {
            for j in 0..4 {
                let v = r.quantized.row(t)[j];
                if j < r.kept_streams {
                    assert_eq!(v, full.quantized.row(t)[j]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}

#[test]
fn ema_two_clusters_converge_to_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut rows = Vec::new();
    for t in 0..120 {
        let centre = if t < 60 { [5.0, 5.0] } else { [-5.0, 1.0] };
        rows.push(vec![
            centre[0] + rng.gen_range(-0.5..0.5),
            centre[1] + rng.gen_range(-0.5..0.5),
        ]);
    }
    let x = Tensor::from_rows(&rows).unwrap();
    let mean = |r: std::ops::Range<usize>| -> Vec<f64> {
        let n = r.len() as f64;
        (0..2).map(|j| r.clone().map(|t| rows[t][j]).sum::<f64>() / n).collect()
    };
    let (m0, m1) = (mean(0..60), mean(60..120));
    let mut cb = book(2, 2, vec![1.0, 1.0, -1.0, 0.0]);
    for _ in 0..500 {
        let r = vq_quantize(&x, &cb).unwrap();
        ema_update(&mut cb, &x, &r.indices).unwrap();
    }
    for (k, m) in [m0, m1].iter().enumerate() {
        let err = sq(cb.codeword(k), m).sqrt();
        assert!(err < 1e-3, "codeword {k} off by {err}");
    }
}

#[test]
fn straight_through_gradient_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = QuantizerConfig {
        mode: QuantMode::Rq,
        num_streams: 2,
        codebook_size: 4,
        dim: 3,
    };
    let x = Tensor::uniform(vec![5, 3], 1.0, &mut rng);
    let mut quant = Quantizer::new(cfg, 0.99).unwrap();
    quant.ensure_initialized(&x, &mut rng).unwrap();
    let w = Tensor::uniform(vec![5, 3], 1.0, &mut rng);
    let loss_of = |z: &Tensor| -> f64 {
        z.data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| (a * b).powi(2) + a * b)
            .sum()
    };

    let q = quant.quantize(&x).unwrap().quantized;
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad(true));
    let st = g.straight_through(xv, q.clone()).unwrap();
    let wv = g.constant(w.clone());
    let prod = g.mul(st, wv).unwrap();
    let sqr = g.mul(prod, prod).unwrap();
    let both = g.add(sqr, prod).unwrap();
    let loss = g.sum(both).unwrap();
    assert!((g.value(loss).item() - loss_of(&q)).abs() < 1e-12);
    let grad = g.backward(loss).unwrap().get(xv).unwrap();

    // identity in place of quantization, differentiated at the quantized point
    let h = 1e-6;
    for i in 0..q.len() {
        let mut plus = q.clone();
        plus.data_mut()[i] += h;
        let mut minus = q.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
        assert!((grad.data()[i] - fd).abs() < 1e-6, "{} vs {fd}", grad.data()[i]);
    }
}
