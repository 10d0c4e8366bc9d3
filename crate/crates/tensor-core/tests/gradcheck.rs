//! Finite-difference agreement for every differentiable op, plus the
//! conv/transposed-conv adjoint identity.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensor_core::testing::max_grad_error;
use tensor_core::{Graph, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape.to_vec(), 1.0, rng)
}

fn check(
    name: &str,
    mk: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> tensor_core::Result<Var>,
) {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let inputs = mk(&mut rng);
        let err = max_grad_error(&build, &inputs, H).unwrap();
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn grad_elementwise() {
    check(
        "add",
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
        |g, v| g.add(v[0], v[1]),
    );
    check(
        "sub",
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
        |g, v| g.sub(v[0], v[1]),
    );
    check(
        "mul",
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
        |g, v| g.mul(v[0], v[1]),
    );
    check("scale", |r| vec![rand_t(r, &[5])], |g, v| g.scale(v[0], -1.7));
    check("gelu", |r| vec![rand_t(r, &[4, 3])], |g, v| g.gelu(v[0]));
    check(
        "sqrt",
        |r| {
            let mut t = rand_t(r, &[6]);
            t.data_mut().iter_mut().for_each(|x| *x = x.abs() + 0.5);
            vec![t]
        },
        |g, v| g.sqrt(v[0]),
    );
}

#[test]
fn grad_linear_algebra() {
    check(
        "matmul",
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])],
        |g, v| g.matmul(v[0], v[1]),
    );
    check(
        "linear",
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2]), rand_t(r, &[2])],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
    check(
        "linear_no_bias",
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])],
        |g, v| g.linear(v[0], v[1], None),
    );
    check(
        "add_bias",
        |r| vec![rand_t(r, &[3, 4]), rand_t(r, &[4])],
        |g, v| g.add_bias(v[0], v[1]),
    );
    check(
        "broadcast_rows",
        |r| vec![rand_t(r, &[1, 3])],
        |g, v| g.broadcast_rows(v[0], 4),
    );
    check("mean_rows", |r| vec![rand_t(r, &[5, 3])], |g, v| g.mean_rows(v[0]));
}

#[test]
fn grad_convolutions() {
    check(
        "conv1d",
        |r| vec![rand_t(r, &[9, 3]), rand_t(r, &[4, 3, 3])],
        |g, v| g.conv1d(v[0], v[1], 2, 1),
    );
    check(
        "conv1d_k1",
        |r| vec![rand_t(r, &[5, 2]), rand_t(r, &[3, 2, 1])],
        |g, v| g.conv1d(v[0], v[1], 1, 0),
    );
    check(
        "conv1d_transposed",
        |r| vec![rand_t(r, &[4, 3]), rand_t(r, &[3, 2, 3])],
        |g, v| g.conv1d_transposed(v[0], v[1], 3),
    );
}

#[test]
fn grad_normalization_and_attention() {
    check(
        "layer_norm",
        |r| vec![rand_t(r, &[3, 5]), rand_t(r, &[5]), rand_t(r, &[5])],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
    check(
        "attention_causal",
        |r| vec![rand_t(r, &[4, 3]), rand_t(r, &[4, 3]), rand_t(r, &[4, 3])],
        |g, v| Ok(g.attention(v[0], v[1], v[2], true)?.0),
    );
    check(
        "attention_full",
        |r| vec![rand_t(r, &[3, 2]), rand_t(r, &[3, 2]), rand_t(r, &[3, 2])],
        |g, v| Ok(g.attention(v[0], v[1], v[2], false)?.0),
    );
}

#[test]
fn grad_lookup_and_losses() {
    check(
        "embedding",
        |r| vec![rand_t(r, &[5, 3])],
        |g, v| g.embedding(v[0], &[4, 0, 4, 2]),
    );
    check(
        "cross_entropy",
        |r| vec![rand_t(r, &[4, 5])],
        |g, v| g.cross_entropy(v[0], &[1, 99, 4, 0], 99),
    );
    check(
        "mse",
        |r| vec![rand_t(r, &[3, 3]), rand_t(r, &[3, 3])],
        |g, v| g.mse(v[0], v[1]),
    );
    check("sum", |r| vec![rand_t(r, &[2, 3])], |g, v| g.sum(v[0]));
    check("mean", |r| vec![rand_t(r, &[2, 3])], |g, v| g.mean(v[0]));
}

#[test]
fn grad_reshaping() {
    check(
        "slice_rows",
        |r| vec![rand_t(r, &[5, 2])],
        |g, v| g.slice_rows(v[0], 1, 3),
    );
    check(
        "select_rows",
        |r| vec![rand_t(r, &[4, 2])],
        |g, v| g.select_rows(v[0], &[3, 3, 0]),
    );
    check(
        "concat_rows",
        |r| vec![rand_t(r, &[2, 3]), rand_t(r, &[1, 3])],
        |g, v| g.concat_rows(&[v[0], v[1], v[0]]),
    );
    check(
        "slice_cols",
        |r| vec![rand_t(r, &[3, 5])],
        |g, v| g.slice_cols(v[0], 2, 2),
    );
    check(
        "concat_cols",
        |r| vec![rand_t(r, &[3, 2]), rand_t(r, &[3, 1])],
        |g, v| g.concat_cols(&[v[1], v[0]]),
    );
    check(
        "repeat_rows",
        |r| vec![rand_t(r, &[3, 2])],
        |g, v| g.repeat_rows(v[0], 3),
    );
}

#[test]
fn grad_composed_block() {
    // pre-norm attention + conv + GELU chain, as used by the models
    check(
        "composition",
        |r| {
            vec![
                rand_t(r, &[6, 4]),
                rand_t(r, &[4]),
                rand_t(r, &[4]),
                rand_t(r, &[4, 4]),
                rand_t(r, &[4, 4, 3]),
            ]
        },
        |g, v| {
            let n = g.layer_norm(v[0], v[1], v[2])?;
            let q = g.matmul(n, v[3])?;
            let (a, _) = g.attention(q, n, n, true)?;
            let h = g.add(a, v[0])?;
            let c = g.conv1d(h, v[4], 1, 1)?;
            g.gelu(c)
        },
    );
}

fn inner(a: &Tensor, b: &Tensor) -> f64 {
    a.dot(b)
}

#[test]
fn conv_transposed_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let stride = rng.gen_range(1..4);
        let k = rng.gen_range(1..5);
        let c_in = rng.gen_range(1..4);
        let c_out = rng.gen_range(1..4);
        let t_out = rng.gen_range(1..7);
        let t_in = (t_out - 1) * stride + k;
        let x = rand_t(&mut rng, &[t_in, c_in]);
        let y = rand_t(&mut rng, &[t_out, c_out]);
        let w = rand_t(&mut rng, &[c_out, c_in, k]);
        let mut g = Graph::new();
        let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(w));
        let fwd = g.conv1d(xv, wv, stride, 0).unwrap();
        let adj = g.conv1d_transposed(yv, wv, stride).unwrap();
        let lhs = inner(g.value(fwd), &y);
        let rhs = inner(&x, g.value(adj));
        assert!((lhs - rhs).abs() <= 1e-9, "{lhs} vs {rhs}");
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(rand_t(&mut rng, &[7, 3]).with_grad(true));
        let w = g.leaf(rand_t(&mut rng, &[3, 3, 3]).with_grad(true));
        let c = g.conv1d(x, w, 1, 1).unwrap();
        let (a, _) = g.attention(c, c, c, true).unwrap();
        let l = g.mean(a).unwrap();
        let grads = g.backward(l).unwrap();
        (
            g.value(l).item().to_bits(),
            grads.get(x).unwrap(),
            grads.get(w).unwrap(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn causal_mask_never_looks_ahead(t in 1usize..9, d in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform(vec![t, d], 3.0, &mut rng));
        let k = g.constant(Tensor::uniform(vec![t, d], 3.0, &mut rng));
        let v = g.constant(Tensor::uniform(vec![t, d], 3.0, &mut rng));
        let (_, map) = g.attention(q, k, v, true).unwrap();
        for i in 0..t {
            let row = map.probs.row(i);
            prop_assert!(row[i + 1..].iter().all(|p| *p == 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
