use crate::error::{dim_err, Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-stochastic attention weights of one head, `T × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMap {
    pub probs: Tensor,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    BroadcastRows(Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
        w_rows: Vec<f64>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        stride: usize,
        w_k: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sqrt(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Mse(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RepeatRows {
        x: Var,
        factor: usize,
    },
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in topological order, so the node
/// index order is a valid evaluation order and its reverse a valid
/// gradient order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Raw gradient slice, if any gradient reached `v`.
    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }
}

fn two_d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return dim_err(op, format!("expected a matrix, got shape {:?}", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that rejects NaN/Inf as soon as any op produces one.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf node; gradients are tracked when the tensor has `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad(false))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    /// `x[t, :] + b` for every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (rows, cols) = two_d("add_bias", tx)?;
        if tb.len() != cols {
            return dim_err("add_bias", format!("bias {} vs width {cols}", tb.len()));
        }
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            for (o, bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push("add_bias", t, Op::AddBias(x, b), &[x, b])
    }

    /// Repeats a single row vector `rows` times.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let tv = self.value(v);
        let cols = tv.len();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(tv.data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        self.push("broadcast_rows", t, Op::BroadcastRows(v), &[v])
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = two_d("matmul", ta)?;
        let (k2, n) = two_d("matmul", tb)?;
        if k != k2 {
            return dim_err("matmul", format!("{m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av != 0.0 {
                    axpy(av, &bd[p * n..(p + 1) * n], orow);
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `x · w + b` with `w: in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Cross-correlation of `x: T×Cin` with `kernel: Cout×Cin×K`.
    /// Output length is `floor((T + 2·padding − K)/stride) + 1`; padding is zeros.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(kernel));
        let (t_in, c_in) = two_d("conv1d", tx)?;
        if tw.shape().len() != 3 {
            return dim_err("conv1d", format!("kernel must be Cout×Cin×K, got {:?}", tw.shape()));
        }
        let (c_out, wc_in, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wc_in != c_in {
            return dim_err("conv1d", format!("input has {c_in} channels, kernel expects {wc_in}"));
        }
        if stride == 0 {
            return dim_err("conv1d", "stride must be positive");
        }
        if k == 0 || k > t_in + 2 * padding {
            return dim_err(
                "conv1d",
                format!("kernel {k} longer than padded input {}", t_in + 2 * padding),
            );
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let width = k * c_in;
        let xd = tx.data();
        let mut cols = vec![0.0; t_out * width];
        for t in 0..t_out {
            for kk in 0..k {
                let src = (t * stride + kk) as isize - padding as isize;
                if src >= 0 && (src as usize) < t_in {
                    let s = src as usize;
                    cols[t * width + kk * c_in..t * width + (kk + 1) * c_in]
                        .copy_from_slice(&xd[s * c_in..(s + 1) * c_in]);
                }
            }
        }
        let wd = tw.data();
        let mut w_rows = vec![0.0; c_out * width];
        for o in 0..c_out {
            for c in 0..c_in {
                for kk in 0..k {
                    w_rows[o * width + kk * c_in + c] = wd[(o * c_in + c) * k + kk];
                }
            }
        }
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let crow = &cols[t * width..(t + 1) * width];
            for o in 0..c_out {
                out[t * c_out + o] = dot(crow, &w_rows[o * width..(o + 1) * width]);
            }
        }
        let value = Tensor::new(vec![t_out, c_out], out)?;
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                x,
                w: kernel,
                stride,
                padding,
                cols,
                w_rows,
            },
            &[x, kernel],
        )
    }

    /// Transposed convolution of `x: T×Cin` with `kernel: Cin×Cout×K`;
    /// output length `(T−1)·stride + K`. Adjoint of [`Graph::conv1d`].
    pub fn conv1d_transposed(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(kernel));
        let (t_in, c_in) = two_d("conv1d_transposed", tx)?;
        if tw.shape().len() != 3 {
            return dim_err(
                "conv1d_transposed",
                format!("kernel must be Cin×Cout×K, got {:?}", tw.shape()),
            );
        }
        let (wc_in, c_out, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wc_in != c_in {
            return dim_err(
                "conv1d_transposed",
                format!("input has {c_in} channels, kernel expects {wc_in}"),
            );
        }
        if stride == 0 || t_in == 0 {
            return dim_err("conv1d_transposed", "stride and length must be positive");
        }
        let t_out = (t_in - 1) * stride + k;
        let wd = tw.data();
        // w_k[kk][c][o]
        let mut w_k = vec![0.0; k * c_in * c_out];
        for c in 0..c_in {
            for o in 0..c_out {
                for kk in 0..k {
                    w_k[(kk * c_in + c) * c_out + o] = wd[(c * c_out + o) * k + kk];
                }
            }
        }
        let xd = tx.data();
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_in {
            for kk in 0..k {
                let dst = t * stride + kk;
                let orow = &mut out[dst * c_out..(dst + 1) * c_out];
                for c in 0..c_in {
                    let xv = xd[t * c_in + c];
                    if xv != 0.0 {
                        let base = (kk * c_in + c) * c_out;
                        axpy(xv, &w_k[base..base + c_out], orow);
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_out, c_out], out)?;
        self.push(
            "conv1d_transposed",
            value,
            Op::ConvTranspose1d {
                x,
                w: kernel,
                stride,
                w_k,
            },
            &[x, kernel],
        )
    }

    /// Per-row normalization with epsilon 1e-5, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, d) = two_d("layer_norm", tx)?;
        if d == 0 || tg.len() != d || tb.len() != d {
            return dim_err("layer_norm", format!("width {d}, gain {}, bias {}", tg.len(), tb.len()));
        }
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.sqrt()).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("sqrt", t, Op::Sqrt(x), &[x])
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√D + mask)·v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<(Var, AttnMap)> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = two_d("attention", tq)?;
        if tk.shape() != [t, d] || tv.shape() != [t, d] {
            return dim_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            );
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; t * t];
        for i in 0..t {
            let limit = if causal { i + 1 } else { t };
            let prow = &mut probs[i * t..(i + 1) * t];
            let mut max = f64::NEG_INFINITY;
            for j in 0..limit {
                let s = dot(tq.row(i), tk.row(j)) * scale;
                prow[j] = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for p in prow[..limit].iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            for p in prow[..limit].iter_mut() {
                *p /= z;
            }
        }
        let mut out = vec![0.0; t * d];
        for i in 0..t {
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..t {
                let p = probs[i * t + j];
                if p != 0.0 {
                    axpy(p, tv.row(j), orow);
                }
            }
        }
        let map = AttnMap {
            probs: Tensor::new(vec![t, t], probs.clone())?,
        };
        let value = Tensor::new(vec![t, d], out)?;
        let var = self.push("attention", value, Op::Attention { q, k, v, probs }, &[q, k, v])?;
        Ok((var, map))
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = two_d("embedding", tt)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Index {
                    op: "embedding",
                    detail: format!("id {id} outside vocabulary of {vocab}"),
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "embedding",
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// `ignore_index`; zero when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = two_d("cross_entropy", tl)?;
        if targets.len() != rows {
            return dim_err("cross_entropy", format!("{rows} rows, {} targets", targets.len()));
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            if target == ignore_index {
                continue;
            }
            if target >= vocab {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    detail: format!("target {target} outside vocabulary of {vocab}"),
                });
            }
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let prow = &mut probs[r * vocab..(r + 1) * vocab];
            let mut z = 0.0;
            for (p, &l) in prow.iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            for p in prow.iter_mut() {
                *p /= z;
            }
            total += -(row[target] - max - z.ln());
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return dim_err("mean", "empty tensor");
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means of a `T×D` matrix, as a `1×D` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = two_d("mean_rows", tx)?;
        if rows == 0 {
            return dim_err("mean_rows", "no rows");
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            axpy(1.0, tx.row(r), &mut out);
        }
        out.iter_mut().for_each(|v| *v /= rows as f64);
        let value = Tensor::new(vec![1, cols], out)?;
        self.push("mean_rows", value, Op::MeanRows(x), &[x])
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mse", ta, tb)?;
        if ta.is_empty() {
            return dim_err("mse", "empty tensor");
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.len() as f64;
        self.push("mse", Tensor::scalar(s), Op::Mse(a, b), &[a, b])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = two_d("slice_rows", tx)?;
        if start + len > rows {
            return dim_err("slice_rows", format!("{start}+{len} > {rows}"));
        }
        let data = tx.data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(vec![len, cols], data)?;
        self.push("slice_rows", value, Op::SliceRows { x, start }, &[x])
    }

    /// Gathers rows `x[idx[i], :]`; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = two_d("select_rows", tx)?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "select_rows",
                    detail: format!("row {i} of {rows}"),
                });
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        self.push("select_rows", value, Op::SelectRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_rows", "nothing to concatenate");
        }
        let cols = two_d("concat_rows", self.value(parts[0]))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (r, c) = two_d("concat_rows", tp)?;
            if c != cols {
                return dim_err("concat_rows", format!("width {c} vs {cols}"));
            }
            data.extend_from_slice(tp.data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = two_d("slice_cols", tx)?;
        if start + len > cols {
            return dim_err("slice_cols", format!("{start}+{len} > {cols}"));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat_cols", "nothing to concatenate");
        }
        let rows = two_d("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = two_d("concat_cols", self.value(p))?;
            if r != rows {
                return dim_err("concat_cols", format!("{r} rows vs {rows}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Nearest-neighbour upsampling: each row repeated `factor` times.
    pub fn repeat_rows(&mut self, x: Var, factor: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = two_d("repeat_rows", tx)?;
        if factor == 0 {
            return dim_err("repeat_rows", "factor must be positive");
        }
        let mut data = Vec::with_capacity(rows * factor * cols);
        for r in 0..rows {
            for _ in 0..factor {
                data.extend_from_slice(tx.row(r));
            }
        }
        let value = Tensor::new(vec![rows * factor, cols], data)?;
        self.push("repeat_rows", value, Op::RepeatRows { x, factor }, &[x])
    }

    /// Forward value `q`, backward identity to `x` (straight-through estimator).
    pub fn straight_through(&mut self, x: Var, q: Tensor) -> Result<Var> {
        same_shape("straight_through", self.value(x), &q)?;
        self.push("straight_through", q, Op::StraightThrough(x), &[x])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| axpy(1.0, g, s));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| axpy(-1.0, g, s));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| axpy(*c, g, s)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |s| axpy(1.0, g, s));
                acc(*b, &mut |s| {
                    let d = s.len();
                    for row in g.chunks(d) {
                        axpy(1.0, row, s);
                    }
                });
            }
            Op::BroadcastRows(v) => acc(*v, &mut |s| {
                let d = s.len();
                for row in g.chunks(d) {
                    axpy(1.0, row, s);
                }
            }),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            s[i * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av != 0.0 {
                                axpy(av, grow, &mut s[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
                cols,
                w_rows,
            } => {
                let tw = &nodes[w.0].value;
                let (c_out, c_in, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let t_in = nodes[x.0].value.shape()[0];
                let width = k * c_in;
                let t_out = g.len() / c_out;
                acc(*w, &mut |s| {
                    let mut dw_rows = vec![0.0; c_out * width];
                    for t in 0..t_out {
                        let crow = &cols[t * width..(t + 1) * width];
                        for o in 0..c_out {
                            let gv = g[t * c_out + o];
                            if gv != 0.0 {
                                axpy(gv, crow, &mut dw_rows[o * width..(o + 1) * width]);
                            }
                        }
                    }
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for kk in 0..k {
                                s[(o * c_in + c) * k + kk] += dw_rows[o * width + kk * c_in + c];
                            }
                        }
                    }
                });
                acc(*x, &mut |s| {
                    let mut dcol = vec![0.0; width];
                    for t in 0..t_out {
                        dcol.iter_mut().for_each(|v| *v = 0.0);
                        for o in 0..c_out {
                            let gv = g[t * c_out + o];
                            if gv != 0.0 {
                                axpy(gv, &w_rows[o * width..(o + 1) * width], &mut dcol);
                            }
                        }
                        for kk in 0..k {
                            let src = (t * stride + kk) as isize - *padding as isize;
                            if src >= 0 && (src as usize) < t_in {
                                let si = src as usize;
                                axpy(
                                    1.0,
                                    &dcol[kk * c_in..(kk + 1) * c_in],
                                    &mut s[si * c_in..(si + 1) * c_in],
                                );
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose1d { x, w, stride, w_k } => {
                let tx = &nodes[x.0].value;
                let tw = &nodes[w.0].value;
                let (c_in, c_out, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
                let t_in = tx.shape()[0];
                let xd = tx.data();
                acc(*x, &mut |s| {
                    for t in 0..t_in {
                        for kk in 0..k {
                            let dst = t * stride + kk;
                            let grow = &g[dst * c_out..(dst + 1) * c_out];
                            for c in 0..c_in {
                                let base = (kk * c_in + c) * c_out;
                                s[t * c_in + c] += dot(grow, &w_k[base..base + c_out]);
                            }
                        }
                    }
                });
                acc(*w, &mut |s| {
                    let mut dw_k = vec![0.0; k * c_in * c_out];
                    for t in 0..t_in {
                        for kk in 0..k {
                            let dst = t * stride + kk;
                            let grow = &g[dst * c_out..(dst + 1) * c_out];
                            for c in 0..c_in {
                                let xv = xd[t * c_in + c];
                                if xv != 0.0 {
                                    let base = (kk * c_in + c) * c_out;
                                    axpy(xv, grow, &mut dw_k[base..base + c_out]);
                                }
                            }
                        }
                    }
                    for c in 0..c_in {
                        for o in 0..c_out {
                            for kk in 0..k {
                                s[(c * c_out + o) * k + kk] += dw_k[(kk * c_in + c) * c_out + o];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = val(*gain);
                let d = gd.len();
                let rows = rstd.len();
                acc(*gain, &mut |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*bias, &mut |s| {
                    for row in g.chunks(d) {
                        axpy(1.0, row, s);
                    }
                });
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = g[r * d + j] * gd[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = g[r * d + j] * gd[j];
                            s[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = val(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(xd[i]);
                    }
                });
            }
            Op::Sqrt(x) => {
                let yd = node.value.data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * 0.5 / yd[i];
                    }
                });
            }
            Op::Attention { q, k, v, probs } => {
                let tq = &nodes[q.0].value;
                let tk = &nodes[k.0].value;
                let tv = &nodes[v.0].value;
                let (t, d) = (tq.shape()[0], tq.shape()[1]);
                let scale = 1.0 / (d as f64).sqrt();
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), dP = g · vᵀ
                let mut ds = vec![0.0; t * t];
                for i in 0..t {
                    let grow = &g[i * d..(i + 1) * d];
                    let mut inner = 0.0;
                    for j in 0..t {
                        let p = probs[i * t + j];
                        if p != 0.0 {
                            let dp = dot(grow, tv.row(j));
                            ds[i * t + j] = dp;
                            inner += dp * p;
                        }
                    }
                    for j in 0..t {
                        let p = probs[i * t + j];
                        ds[i * t + j] = if p != 0.0 {
                            p * (ds[i * t + j] - inner) * scale
                        } else {
                            0.0
                        };
                    }
                }
                acc(*v, &mut |s| {
                    for i in 0..t {
                        let grow = &g[i * d..(i + 1) * d];
                        for j in 0..t {
                            let p = probs[i * t + j];
                            if p != 0.0 {
                                axpy(p, grow, &mut s[j * d..(j + 1) * d]);
                            }
                        }
                    }
                });
                acc(*q, &mut |s| {
                    for i in 0..t {
                        for j in 0..t {
                            let w = ds[i * t + j];
                            if w != 0.0 {
                                axpy(w, tk.row(j), &mut s[i * d..(i + 1) * d]);
                            }
                        }
                    }
                });
                acc(*k, &mut |s| {
                    for i in 0..t {
                        for j in 0..t {
                            let w = ds[i * t + j];
                            if w != 0.0 {
                                axpy(w, tq.row(i), &mut s[j * d..(j + 1) * d]);
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                acc(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut s[id * d..(id + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = nodes[logits.0].value.shape()[1];
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |s| {
                    for (r, &target) in targets.iter().enumerate() {
                        if target == *ignore_index {
                            continue;
                        }
                        let srow = &mut s[r * vocab..(r + 1) * vocab];
                        axpy(scale, &probs[r * vocab..(r + 1) * vocab], srow);
                        srow[target] -= scale;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => acc(*x, &mut |s| {
                let c = g[0] / s.len() as f64;
                s.iter_mut().for_each(|v| *v += c);
            }),
            Op::MeanRows(x) => acc(*x, &mut |s| {
                let d = g.len();
                let rows = s.len() / d;
                for row in s.chunks_mut(d) {
                    axpy(1.0 / rows as f64, g, row);
                }
            }),
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = 2.0 * g[0] / va.len() as f64;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += c * (va[i] - vb[i]);
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= c * (va[i] - vb[i]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                acc(*x, &mut |s| axpy(1.0, g, &mut s[start * cols..start * cols + g.len()]));
            }
            Op::SelectRows { x, idx } => {
                let cols = node.value.cols();
                acc(*x, &mut |s| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(1.0, &g[r * cols..(r + 1) * cols], &mut s[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    acc(p, &mut |s| axpy(1.0, &g[offset..offset + len], s));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let cols = nodes[x.0].value.cols();
                let rows = node.value.rows();
                acc(*x, &mut |s| {
                    for r in 0..rows {
                        axpy(
                            1.0,
                            &g[r * len..(r + 1) * len],
                            &mut s[r * cols + start..r * cols + start + len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(p, &mut |s| {
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &g[r * total + offset..r * total + offset + w],
                                &mut s[r * w..(r + 1) * w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::RepeatRows { x, factor } => {
                let cols = node.value.cols();
                acc(*x, &mut |s| {
                    for (r, row) in g.chunks(cols).enumerate() {
                        let src = r / factor;
                        axpy(1.0, row, &mut s[src * cols..(src + 1) * cols]);
                    }
                });
            }
            Op::StraightThrough(x) => acc(*x, &mut |s| axpy(1.0, g, s)),
        }
    }
}
