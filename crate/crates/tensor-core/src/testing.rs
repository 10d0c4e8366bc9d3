//! Central finite-difference gradient checking, kept independent of the
//! backward rules it verifies. Only compiled for tests.

use rand::{Rng, SeedableRng};

use crate::{Graph, Result, Tensor, Var};

pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Denominator floor so near-zero gradient entries are compared on an
/// absolute scale instead of amplifying rounding noise.
pub const REL_FLOOR: f64 = 1e-6;

fn projected_loss(build: &Builder<'_>, inputs: &[Tensor], proj_seed: u64) -> Result<(Graph, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_grad(true))).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let mut rng = rand::rngs::StdRng::seed_from_u64(proj_seed);
    let n: usize = shape.iter().product();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(shape, weights)?);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss))
}

/// Maximum relative error between `backward()` and central differences
/// with step `h`, over every element of every input.
pub fn max_grad_error(build: &Builder<'_>, inputs: &[Tensor], h: f64) -> Result<f64> {
    let (g, vars, loss) = projected_loss(build, inputs, 0x5eed)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .raw(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (gp, _, lp) = projected_loss(build, &plus, 0x5eed)?;
            let (gm, _, lm) = projected_loss(build, &minus, 0x5eed)?;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
