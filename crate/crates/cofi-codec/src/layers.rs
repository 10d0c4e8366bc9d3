use rand::Rng;
use tensor_core::{Bound, Graph, ParamStore, Result, Var};

pub(crate) fn init_conv<R: Rng + ?Sized>(
    p: &mut ParamStore,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut R,
) {
    p.init_uniform(format!("{name}.w"), vec![c_out, c_in, k], c_in * k, rng);
    p.init_zeros(format!("{name}.b"), vec![c_out]);
}

pub(crate) fn init_linear<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) {
    p.init_uniform(format!("{name}.w"), vec![d_in, d_out], d_in, rng);
    p.init_zeros(format!("{name}.b"), vec![d_out]);
}

pub(crate) fn init_resnet<R: Rng + ?Sized>(
    p: &mut ParamStore,
    name: &str,
    units: usize,
    c: usize,
    k: usize,
    rng: &mut R,
) {
    for u in 0..units {
        init_conv(p, &format!("{name}.{u}.conv1"), c, c, k, rng);
        init_conv(p, &format!("{name}.{u}.conv2"), c, c, k, rng);
    }
}

pub(crate) fn conv(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let y = g.conv1d(x, b.get(&format!("{name}.w"))?, stride, padding)?;
    g.add_bias(y, b.get(&format!("{name}.b"))?)
}

pub(crate) fn conv_transposed(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = g.conv1d_transposed(x, b.get(&format!("{name}.w"))?, stride)?;
    g.add_bias(y, b.get(&format!("{name}.b"))?)
}

pub(crate) fn linear(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    g.linear(x, b.get(&format!("{name}.w"))?, Some(b.get(&format!("{name}.b"))?))
}

/// Stack of pre-activation residual units `x + conv(gelu(conv(gelu(x))))`.
pub(crate) fn resnet(g: &mut Graph, b: &Bound, name: &str, units: usize, k: usize, mut x: Var) -> Result<Var> {
    let pad = k / 2;
    for u in 0..units {
        let h = g.gelu(x)?;
        let h = conv(g, b, &format!("{name}.{u}.conv1"), h, 1, pad)?;
        let h = g.gelu(h)?;
        let h = conv(g, b, &format!("{name}.{u}.conv2"), h, 1, pad)?;
        x = g.add(x, h)?;
    }
    Ok(x)
}
