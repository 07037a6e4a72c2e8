use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{Result, Tensor, TensorError};
use crate::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output keeps the input's spatial size (odd square kernels only).
    Same,
    Valid,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Reshape(Var),
    LogSoftmax(Var),
    Softmax(Var),
    MaskedLogSoftmax { x: Var, mask: Vec<bool> },
    L2Normalize { x: Var, norms: Vec<S> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    SelectRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Max { x: Var, at: usize },
    SumRows(Var),
    MaxRows { x: Var, at: Vec<usize> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in creation order, so every input precedes its
/// consumers. A graph supports exactly one [`Graph::backward`] call.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    zero_norm_rows: usize,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<S: Scalar>(op: &'static str, ts: &[&Tensor<S>]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, contrib: Vec<S>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot => *slot = Some(contrib),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            zero_norm_rows: 0,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Rows that [`Graph::l2_normalize`] met with zero norm.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant copy of `v`'s current value (gradient does not flow back).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
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

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [m, n] => Ok((*m, *n)),
            _ => Err(mismatch(op, &[t])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", &[self.value(a), self.value(b)]));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), S::zero(), &mut out, (n, 1));
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`; the row-wise inner products.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", &[self.value(a), self.value(b)]));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (1, k), S::zero(), &mut out, (n, 1));
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul_nt", t, Op::MatMulNt(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_row_bias")?;
        if self.value(b).shape() != [n] {
            return Err(mismatch("add_row_bias", &[self.value(x), self.value(b)]));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("add_row_bias", t, Op::AddRowBias(x, b), &[x, b])
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, &[ta, tb]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("div", a, b, |x, y| x / y)?;
        self.push("div", t, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -S::one())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push("relu", t, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.abs());
        self.push("abs", t, Op::Abs(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.exp());
        self.push("exp", t, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.ln());
        self.push("log", t, Op::Log(x), &[x])
    }

    /// 2x2 stride-2 max pooling over `[n, c, h, w]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, c, h, w] = t.shape() else {
            return Err(mismatch("max_pool2", &[t]));
        };
        if h < 2 || w < 2 {
            return Err(mismatch("max_pool2", &[t]));
        }
        let (out, argmax) = kernels::max_pool2(t.data(), n * c, h, w);
        let t = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push("max_pool2", t, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    /// Collapses every non-leading extent: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(x, shape)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "log_softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = kernels::row_logsumexp(row, None).expect("non-empty row");
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("log_softmax", t, Op::LogSoftmax(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "softmax")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            let lse = kernels::row_logsumexp(row, None).expect("non-empty row");
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    /// Row-wise log-softmax over the entries selected by `mask`; unselected
    /// entries evaluate to zero and receive no gradient. Every row must select
    /// at least one entry.
    pub fn masked_log_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (_, n) = self.dims2(x, "masked_log_softmax")?;
        if mask.len() != self.value(x).len() {
            return Err(TensorError::Invalid {
                op: "masked_log_softmax",
                msg: format!("mask has {} entries for {} values", mask.len(), self.value(x).len()),
            });
        }
        let mut out = self.value(x).data().to_vec();
        for (i, (row, m)) in out.chunks_mut(n).zip(mask.chunks(n)).enumerate() {
            let lse = kernels::row_logsumexp(row, Some(m)).ok_or_else(|| TensorError::Invalid {
                op: "masked_log_softmax",
                msg: format!("row {i} selects no entries"),
            })?;
            for (v, &keep) in row.iter_mut().zip(m) {
                *v = if keep { *v - lse } else { S::zero() };
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("masked_log_softmax", t, Op::MaskedLogSoftmax { x, mask }, &[x])
    }

    /// Scales each row to unit Euclidean norm. A zero row stays zero and
    /// increments [`Graph::zero_norm_rows`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "l2_normalize")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm > S::zero() {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                self.zero_norm_rows += 1;
            }
            norms.push(norm);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push("l2_normalize", t, Op::L2Normalize { x, norms }, &[x])
    }

    /// Stride-1 convolution: `x: [n, c, h, w]`, `w: [oc, c, kh, kw]`, `b: [oc]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[n, c, h, wd], &[oc, c2, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch("conv2d", &[tx, tw, tb]));
        };
        if c != c2 || tb.shape() != [oc] {
            return Err(mismatch("conv2d", &[tx, tw, tb]));
        }
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same if kh == kw && kh % 2 == 1 => kh / 2,
            Padding::Same => {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    msg: format!("same padding needs an odd square kernel, got {kh}x{kw}"),
                })
            }
        };
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(mismatch("conv2d", &[tx, tw, tb]));
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            height: h,
            width: wd,
            out_ch: oc,
            kh,
            kw,
            pad,
        };
        let (patch, npix) = (geom.patch(), geom.out_pixels());
        let img_len = c * h * wd;
        let mut cols = vec![S::zero(); patch * npix];
        let mut out = vec![S::zero(); n * oc * npix];
        for img in 0..n {
            kernels::im2col(&tx.data()[img * img_len..(img + 1) * img_len], &geom, &mut cols);
            let dst = &mut out[img * oc * npix..(img + 1) * oc * npix];
            S::gemm(oc, patch, npix, tw.data(), (patch, 1), &cols, (npix, 1), S::zero(), dst, (npix, 1));
            for (ch, plane) in dst.chunks_mut(npix).enumerate() {
                let bv = tb.data()[ch];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let t = Tensor::new(vec![n, oc, geom.out_h(), geom.out_w()], out)?;
        self.push("conv2d", t, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(idx)?;
        self.push(
            "select_rows",
            t,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&ts)?;
        self.push("concat_rows", t, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: S = t.data().iter().copied().sum();
        let m = s / S::lit(t.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn max(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        let at = argmax(d);
        let v = d[at];
        self.push("max", Tensor::scalar(v), Op::Max { x, at }, &[x])
    }

    /// `[m, n] -> [m]` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "sum_rows")?;
        let out = self.value(x).data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let t = Tensor::new(vec![m], out)?;
        self.push("sum_rows", t, Op::SumRows(x), &[x])
    }

    /// `[m, n] -> [m]` row maxima (first occurrence on ties).
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "max_rows")?;
        let d = self.value(x).data();
        let at: Vec<usize> = d.chunks(n).map(argmax).collect();
        let out = at.iter().enumerate().map(|(i, &j)| d[i * n + j]).collect();
        let t = Tensor::new(vec![m], out)?;
        self.push("max_rows", t, Op::MaxRows { x, at }, &[x])
    }

    /// Reverse pass from a scalar `loss`. Gradients are returned for every
    /// gradient-requiring leaf reachable from `loss`; constants and
    /// unreachable leaves have none.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let mut out = Gradients {
            grads: (0..nodes.len()).map(|_| None).collect(),
        };
        if !nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    out.grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if rg(*a) {
                        let mut da = vec![S::zero(); m * k];
                        S::gemm(m, n, k, &g, (n, 1), tb.data(), (1, n), S::zero(), &mut da, (k, 1));
                        accumulate(&mut grads, *a, da);
                    }
                    if rg(*b) {
                        let mut db = vec![S::zero(); k * n];
                        S::gemm(k, m, n, ta.data(), (1, k), &g, (n, 1), S::zero(), &mut db, (n, 1));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[0];
                    if rg(*a) {
                        let mut da = vec![S::zero(); m * k];
                        S::gemm(m, n, k, &g, (n, 1), tb.data(), (k, 1), S::zero(), &mut da, (k, 1));
                        accumulate(&mut grads, *a, da);
                    }
                    if rg(*b) {
                        let mut db = vec![S::zero(); n * k];
                        S::gemm(n, m, k, &g, (1, n), ta.data(), (k, 1), S::zero(), &mut db, (k, 1));
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::AddRowBias(x, b) => {
                    let n = val(*b).len();
                    if rg(*b) {
                        let mut db = vec![S::zero(); n];
                        for row in g.chunks(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if rg(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|&v| -v).collect());
                    }
                    if rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (da, db) = (val(*a).data(), val(*b).data());
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(db).map(|(&gv, &bv)| gv * bv).collect());
                    }
                    if rg(*b) {
                        accumulate(&mut grads, *b, g.iter().zip(da).map(|(&gv, &av)| gv * av).collect());
                    }
                }
                Op::Div(a, b) => {
                    let (da, db) = (val(*a).data(), val(*b).data());
                    if rg(*a) {
                        accumulate(&mut grads, *a, g.iter().zip(db).map(|(&gv, &bv)| gv / bv).collect());
                    }
                    if rg(*b) {
                        let gb = g
                            .iter()
                            .zip(da.iter().zip(db))
                            .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                            .collect();
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Scale(x, c) => {
                    if rg(*x) {
                        accumulate(&mut grads, *x, g.iter().map(|&v| v * *c).collect());
                    }
                }
                Op::Relu(x) => {
                    let xs = val(*x).data();
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Abs(x) => {
                    let xs = val(*x).data();
                    let dx = g
                        .iter()
                        .zip(xs)
                        .map(|(&gv, &xv)| {
                            if xv > S::zero() {
                                gv
                            } else if xv < S::zero() {
                                -gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    accumulate(&mut grads, *x, g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect());
                }
                Op::Log(x) => {
                    let xs = val(*x).data();
                    accumulate(&mut grads, *x, g.iter().zip(xs).map(|(&gv, &xv)| gv / xv).collect());
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![S::zero(); val(*x).len()];
                    for (&gv, &src) in g.iter().zip(argmax) {
                        dx[src as usize] += gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g),
                Op::LogSoftmax(x) => {
                    let n = node.value.shape()[1];
                    let mut dx = g;
                    for (drow, yrow) in dx.chunks_mut(n).zip(y.chunks(n)) {
                        let s: S = drow.iter().copied().sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow) {
                            *d -= yv.exp() * s;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let n = node.value.shape()[1];
                    let mut dx = g;
                    for (drow, yrow) in dx.chunks_mut(n).zip(y.chunks(n)) {
                        let s: S = drow.iter().zip(yrow).map(|(&d, &yv)| d * yv).sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow) {
                            *d = yv * (*d - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedLogSoftmax { x, mask } => {
                    let n = node.value.shape()[1];
                    let mut dx = g;
                    for ((drow, yrow), mrow) in dx.chunks_mut(n).zip(y.chunks(n)).zip(mask.chunks(n)) {
                        let s: S = drow.iter().zip(mrow).filter(|(_, &m)| m).map(|(&d, _)| d).sum();
                        for ((d, &yv), &m) in drow.iter_mut().zip(yrow).zip(mrow) {
                            *d = if m { *d - yv.exp() * s } else { S::zero() };
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::L2Normalize { x, norms } => {
                    let n = node.value.shape()[1];
                    let mut dx = g;
                    for ((drow, yrow), &norm) in dx.chunks_mut(n).zip(y.chunks(n)).zip(norms) {
                        if norm > S::zero() {
                            let dot: S = drow.iter().zip(yrow).map(|(&d, &yv)| d * yv).sum();
                            for (d, &yv) in drow.iter_mut().zip(yrow) {
                                *d = (*d - yv * dot) / norm;
                            }
                        } else {
                            drow.fill(S::zero());
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (patch, npix, oc) = (geom.patch(), geom.out_pixels(), geom.out_ch);
                    let img_len = geom.in_ch * geom.height * geom.width;
                    if rg(*b) {
                        let mut db = vec![S::zero(); oc];
                        for img in g.chunks(oc * npix) {
                            for (d, plane) in db.iter_mut().zip(img.chunks(npix)) {
                                *d += plane.iter().copied().sum();
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    let (need_w, need_x) = (rg(*w), rg(*x));
                    if need_w || need_x {
                        let xs = val(*x).data();
                        let ws = val(*w).data();
                        let mut cols = vec![S::zero(); patch * npix];
                        let mut dw = if need_w { vec![S::zero(); oc * patch] } else { Vec::new() };
                        let mut dx = if need_x { vec![S::zero(); xs.len()] } else { Vec::new() };
                        for img in 0..geom.batch {
                            let gi = &g[img * oc * npix..(img + 1) * oc * npix];
                            if need_w {
                                kernels::im2col(&xs[img * img_len..(img + 1) * img_len], geom, &mut cols);
                                S::gemm(oc, npix, patch, gi, (npix, 1), &cols, (1, npix), S::one(), &mut dw, (patch, 1));
                            }
                            if need_x {
                                S::gemm(patch, oc, npix, ws, (1, patch), gi, (npix, 1), S::zero(), &mut cols, (npix, 1));
                                kernels::col2im(&cols, geom, &mut dx[img * img_len..(img + 1) * img_len]);
                            }
                        }
                        if need_w {
                            accumulate(&mut grads, *w, dw);
                        }
                        if need_x {
                            accumulate(&mut grads, *x, dx);
                        }
                    }
                }
                Op::SelectRows { x, idx } => {
                    let src = val(*x);
                    let w = src.row_len();
                    let mut dx = vec![S::zero(); src.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &gv) in dx[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *d += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        if rg(p) {
                            accumulate(&mut grads, p, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Op::Sum(x) => {
                    accumulate(&mut grads, *x, vec![g[0]; val(*x).len()]);
                }
                Op::Mean(x) => {
                    let n = val(*x).len();
                    accumulate(&mut grads, *x, vec![g[0] / S::lit(n as f64); n]);
                }
                Op::Max { x, at } => {
                    let mut dx = vec![S::zero(); val(*x).len()];
                    dx[*at] = g[0];
                    accumulate(&mut grads, *x, dx);
                }
                Op::SumRows(x) => {
                    let n = val(*x).shape()[1];
                    let dx = g.iter().flat_map(|&gv| std::iter::repeat(gv).take(n)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxRows { x, at } => {
                    let n = val(*x).shape()[1];
                    let mut dx = vec![S::zero(); val(*x).len()];
                    for (i, (&gv, &j)) in g.iter().zip(at).enumerate() {
                        dx[i * n + j] = gv;
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(out)
    }
}

fn argmax<S: Scalar>(d: &[S]) -> usize {
    let mut at = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[at] {
            at = i;
        }
    }
    at
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of `v`, or `None` if `v` is a constant or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
