//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding its
//! output value. [`Tape::backward`] consumes the tape and walks the nodes in
//! reverse creation order, which is a reverse topological order because a node
//! can only reference nodes created before it.

use super::kernels;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    BceLogits(Var, Vec<T>),
    BceProb(Var, Vec<T>),
    Dice(Var, Vec<T>, f64),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug, Default)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

fn rows_cols<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    let cols = *t.shape().last().unwrap_or(&1);
    (t.len() / cols, cols)
}

fn mat_dims<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape {
            op,
            shape: s.to_vec(),
            reason: "expected a matrix".into(),
        }),
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = mat_dims("matmul", ta)?;
        let (k2, n) = mat_dims("matmul", tb)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = mat_dims("transpose", t)?;
        let out = kernels::transpose(t.data(), r, c);
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[r×c] + bias[c]`, the bias repeated on every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, c) = rows_cols(tx);
        if tb.len() != c {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            add_into(row, tb.data());
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    /// `x[r×c]` with row `i` multiplied by `g[i]`.
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let (r, c) = rows_cols(tx);
        if tg.len() != r {
            return Err(Error::Dimension {
                op: "scale_rows",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for (row, &s) in data.chunks_exact_mut(c).zip(tg.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("scale_rows", t, Op::ScaleRows(x, g), &[x, g])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| T::from_f64(v.to_f64() * s)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("scale", t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| T::from_f64(v.to_f64() + s)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, c) = rows_cols(t);
        let out = kernels::softmax_rows(t.data(), c);
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis (population variance, ε = 1e-5),
    /// followed by the learned `gamma` scale and `beta` shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, c) = rows_cols(tx);
        if tg.len() != c || tb.len() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut xhat = vec![T::default(); tx.len()];
        let mut out = vec![T::default(); tx.len()];
        let mut rstds = Vec::with_capacity(tx.len() / c);
        for ((src, xh), dst) in tx.data().chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            let mean = kernels::sum_f64(src) / c as f64;
            let var = src.iter().map(|&v| (v.to_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            rstds.push(rstd);
            for j in 0..c {
                let h = (src[j].to_f64() - mean) * rstd;
                xh[j] = T::from_f64(h);
                dst[j] = T::from_f64(h * tg.data()[j].to_f64() + tb.data()[j].to_f64());
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd: rstds,
        };
        self.push("layer_norm", t, op, &[x, gamma, beta])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(name, t, op, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, kernels::gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = T::from_f64(kernels::sum_f64(self.value(a).data()));
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = T::from_f64(kernels::sum_f64(t.data()) / t.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat_rows",
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        let (_, c) = mat_dims("concat_rows", self.value(*first))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            let (r, pc) = mat_dims("concat_rows", t)?;
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(*first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            rows += r;
        }
        let t = Tensor::from_parts(vec![rows, c], data);
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape {
            op: "concat_cols",
            shape: vec![],
            reason: "nothing to concatenate".into(),
        })?;
        let (r, _) = mat_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = mat_dims("concat_cols", t)?;
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(*first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::from_parts(vec![r, total], data);
        self.push("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = mat_dims("slice_rows", t)?;
        if len == 0 || start + len > r {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::from_parts(vec![len, c], data), Op::SliceRows(a, start), &[a])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = mat_dims("slice_cols", t)?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for row in t.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![r, len], data), Op::SliceCols(a, start), &[a])
    }

    /// Rows `idx[0], idx[1], …` of a matrix. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = mat_dims("gather_rows", t)?;
        if idx.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                shape: vec![0, c],
                reason: "empty index list".into(),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let t = Tensor::from_parts(vec![idx.len(), c], data);
        self.push("gather_rows", t, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Copy of `base` with row `idx[k]` replaced by row `k` of `src`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (tb, ts) = (self.value(base), self.value(src));
        let (r, c) = mat_dims("scatter_rows", tb)?;
        let (sr, sc) = mat_dims("scatter_rows", ts)?;
        if sc != c || sr != idx.len() {
            return Err(Error::Dimension {
                op: "scatter_rows",
                lhs: tb.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let mut seen = vec![false; r];
        let mut data = tb.data().to_vec();
        for (k, &i) in idx.iter().enumerate() {
            if i >= r || seen[i] {
                return Err(Error::Index {
                    op: "scatter_rows",
                    index: i,
                    len: r,
                });
            }
            seen[i] = true;
            data[i * c..(i + 1) * c].copy_from_slice(ts.row(k));
        }
        let t = Tensor::from_parts(tb.shape().to_vec(), data);
        let op = Op::ScatterRows {
            base,
            src,
            idx: idx.to_vec(),
        };
        self.push("scatter_rows", t, op, &[base, src])
    }

    /// Mean binary cross-entropy of `logits` against 0/1 `target`, in the
    /// stable form `max(x,0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let t = self.value(logits);
        same_shape("bce_with_logits", t, target)?;
        let total: f64 = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| {
                let (x, y) = (x.to_f64(), y.to_f64());
                x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let loss = T::from_f64(total / t.len() as f64);
        let op = Op::BceLogits(logits, target.data().to_vec());
        self.push("bce_with_logits", Tensor::scalar(loss), op, &[logits])
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to
    /// `[1e-6, 1 − 1e-6]`) against `target`.
    pub fn bce_prob(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let t = self.value(p);
        same_shape("bce_prob", t, target)?;
        let total: f64 = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&q, &y)| {
                let q = q.to_f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let y = y.to_f64();
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum();
        let loss = T::from_f64(total / t.len() as f64);
        self.push("bce_prob", Tensor::scalar(loss), Op::BceProb(p, target.data().to_vec()), &[p])
    }

    /// `1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε)`.
    pub fn dice(&mut self, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let t = self.value(p);
        same_shape("dice", t, target)?;
        let (inter, denom) = dice_terms(t.data(), target.data(), eps);
        let loss = T::from_f64(1.0 - (2.0 * inter + eps) / denom);
        self.push("dice", Tensor::scalar(loss), Op::Dice(p, target.data().to_vec(), eps), &[p])
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape and returns the
    /// gradients of every leaf created with `requires_grad`.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients {
                grads: (0..n).map(|_| None).collect(),
            });
        }
        grads[loss.0] = Some(vec![T::from_f64(1.0)]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.backprop(node, &g, &mut grads);
        }

        let mut out: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for (id, node) in self.nodes.drain(..).enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id].take().unwrap_or_else(|| vec![T::default(); node.value.len()]);
                out[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut accum = |v: Var, delta: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, &delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(val(*a));
                let n = val(*b).shape()[1];
                if wants(*a) {
                    accum(*a, kernels::matmul_nt(g, val(*b).data(), m, n, k));
                }
                if wants(*b) {
                    accum(*b, kernels::matmul_tn(val(*a).data(), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(&node.value);
                accum(*a, kernels::transpose(g, r, c));
            }
            Op::Reshape(a) | Op::AddScalar(a) => accum(*a, g.to_vec()),
            Op::Add(a, b) => {
                accum(*a, g.to_vec());
                accum(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accum(*a, g.to_vec());
                accum(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accum(*a, g.iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect());
                }
                if wants(*b) {
                    accum(*b, g.iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddBias(x, b) => {
                accum(*x, g.to_vec());
                if wants(*b) {
                    let c = val(*b).len();
                    let mut db = vec![0f64; c];
                    for row in g.chunks_exact(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v.to_f64();
                        }
                    }
                    accum(*b, db.into_iter().map(T::from_f64).collect());
                }
            }
            Op::ScaleRows(x, s) => {
                let (_, c) = rows_cols(val(*x));
                let sv = val(*s).data();
                if wants(*x) {
                    let mut dx = g.to_vec();
                    for (row, &k) in dx.chunks_exact_mut(c).zip(sv) {
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    accum(*x, dx);
                }
                if wants(*s) {
                    let ds = g
                        .chunks_exact(c)
                        .zip(val(*x).data().chunks_exact(c))
                        .map(|(gr, xr)| T::from_f64(gr.iter().zip(xr).map(|(&a, &b)| a.to_f64() * b.to_f64()).sum::<f64>()))
                        .collect();
                    accum(*s, ds);
                }
            }
            Op::Scale(a, s) => accum(*a, g.iter().map(|&v| T::from_f64(v.to_f64() * s)).collect()),
            Op::Softmax(a) => {
                let (_, c) = rows_cols(&node.value);
                let mut dx = vec![T::default(); g.len()];
                for ((gr, yr), dr) in g.chunks_exact(c).zip(node.value.data().chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a.to_f64() * b.to_f64()).sum();
                    for j in 0..c {
                        dr[j] = T::from_f64(yr[j].to_f64() * (gr[j].to_f64() - dot));
                    }
                }
                accum(*a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*gamma).len();
                let gam = val(*gamma).data();
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0f64; c];
                    let mut db = vec![0f64; c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += gr[j].to_f64() * hr[j].to_f64();
                            db[j] += gr[j].to_f64();
                        }
                    }
                    accum(*gamma, dg.into_iter().map(T::from_f64).collect());
                    accum(*beta, db.into_iter().map(T::from_f64).collect());
                }
                if wants(*x) {
                    let mut dx = vec![T::default(); g.len()];
                    for (((gr, hr), dr), &rs) in g
                        .chunks_exact(c)
                        .zip(xhat.chunks_exact(c))
                        .zip(dx.chunks_exact_mut(c))
                        .zip(rstd)
                    {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(&a, &b)| a.to_f64() * b.to_f64()).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b.to_f64()).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dr[j] = T::from_f64(rs * (dh[j] - mean_dh - hr[j].to_f64() * mean_dh_h));
                        }
                    }
                    accum(*x, dx);
                }
            }
            Op::Gelu(a) => {
                let dx = g.iter().zip(val(*a).data()).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                accum(*a, dx);
            }
            Op::Sigmoid(a) => {
                let dx = g.iter().zip(node.value.data()).map(|(&gv, &y)| T::from_f64(gv.to_f64() * y.to_f64() * (1.0 - y.to_f64()))).collect();
                accum(*a, dx);
            }
            Op::Sum(a) => accum(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                accum(*a, vec![T::from_f64(g[0].to_f64() / n as f64); n]);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    accum(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = rows_cols(&node.value);
                let mut start = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for row in g.chunks_exact(total) {
                            d.extend_from_slice(&row[start..start + w]);
                        }
                        accum(p, d);
                    }
                    start += w;
                }
            }
            Op::SliceRows(a, start) => {
                let c = val(*a).shape()[1];
                let mut d = vec![T::default(); val(*a).len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                accum(*a, d);
            }
            Op::SliceCols(a, start) => {
                let c = val(*a).shape()[1];
                let w = node.value.shape()[1];
                let mut d = vec![T::default(); val(*a).len()];
                for (dr, gr) in d.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                    dr[*start..start + w].copy_from_slice(gr);
                }
                accum(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let c = val(*a).shape()[1];
                let mut d = vec![T::default(); val(*a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    add_into(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                }
                accum(*a, d);
            }
            Op::ScatterRows { base, src, idx } => {
                let c = val(*base).shape()[1];
                if wants(*base) {
                    let mut d = g.to_vec();
                    for &i in idx {
                        d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = T::default());
                    }
                    accum(*base, d);
                }
                if wants(*src) {
                    let mut d = Vec::with_capacity(idx.len() * c);
                    for &i in idx {
                        d.extend_from_slice(&g[i * c..(i + 1) * c]);
                    }
                    accum(*src, d);
                }
            }
            Op::BceLogits(a, target) => {
                let n = target.len() as f64;
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&x, &y)| T::from_f64((kernels::sigmoid(x).to_f64() - y.to_f64()) / n * g[0].to_f64()))
                    .collect();
                accum(*a, d);
            }
            Op::BceProb(a, target) => {
                let n = target.len() as f64;
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&q, &y)| {
                        let (q, y) = (q.to_f64(), y.to_f64());
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&q) {
                            return T::default();
                        }
                        T::from_f64(-(y / q - (1.0 - y) / (1.0 - q)) / n * g[0].to_f64())
                    })
                    .collect();
                accum(*a, d);
            }
            Op::Dice(a, target, eps) => {
                let (inter, denom) = dice_terms(val(*a).data(), target, *eps);
                let numer = 2.0 * inter + eps;
                let d = target
                    .iter()
                    .map(|&t| T::from_f64(-(2.0 * t.to_f64() * denom - numer) / (denom * denom) * g[0].to_f64()))
                    .collect();
                accum(*a, d);
            }
        }
    }
}

/// `(Σ p·t, Σ p + Σ t + ε)`
fn dice_terms<T: Real>(p: &[T], t: &[T], eps: f64) -> (f64, f64) {
    let mut inter = 0f64;
    let mut total = eps;
    for (&a, &b) in p.iter().zip(t) {
        inter += a.to_f64() * b.to_f64();
        total += a.to_f64() + b.to_f64();
    }
    (inter, total)
}
