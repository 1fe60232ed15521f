use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulConst(Var, Arc<Vec<T>>),
    Blend {
        new: Var,
        old: Var,
        mask: Arc<Vec<T>>,
    },
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    MaskedSoftmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Stack(Vec<Var>),
    AttnScores {
        query: Var,
        keys: Var,
    },
    AttnContext {
        weights: Var,
        values: Var,
    },
    LstmCell {
        gates: Var,
        cell: Var,
        acts: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Arc<Tensor<T>>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a valid topological order;
/// [`Tape::backward`] walks them in reverse.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    training: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    let shapes = shapes
        .iter()
        .map(|s| format!("{s:?}"))
        .collect::<Vec<_>>()
        .join(" vs ");
    Error::Shape { op, shapes }
}

fn dims2(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(shape_err(op, &[s])),
    }
}

fn dims3(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[a, b, c] => Ok((a, b, c)),
        s => Err(shape_err(op, &[s])),
    }
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(row[0], T::max);
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            training: false,
        }
    }

    pub fn training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A non-differentiated input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A named leaf whose gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, name: &str, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", av)?;
        let (k2, n) = dims2("matmul", bv)?;
        if k != k2 {
            return Err(shape_err("matmul", &[av.shape(), bv.shape()]));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            av.data(),
            k as isize,
            1,
            bv.data(),
            n as isize,
            1,
            T::ZERO,
            &mut out,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, &[av.shape(), bv.shape()]));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = av.shape().to_vec();
        self.push(name, Tensor::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = dims2("add_bias", xv)?;
        if bv.shape() != [n] {
            return Err(shape_err("add_bias", &[xv.shape(), bv.shape()]));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let shape = xv.shape().to_vec();
        self.push("add_bias", Tensor::new(shape, data)?, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * s);
        self.push("scale", t, Op::Scale(x, s))
    }

    /// Element-wise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<T>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != c.len() {
            return Err(shape_err("mul_const", &[xv.shape(), &[c.len()]]));
        }
        let data = xv
            .data()
            .iter()
            .zip(c.iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let shape = xv.shape().to_vec();
        self.push("mul_const", Tensor::new(shape, data)?, Op::MulConst(x, c))
    }

    /// Row-wise select: `mask[r] * new[r] + (1 - mask[r]) * old[r]`.
    pub fn blend(&mut self, new: Var, old: Var, mask: Arc<Vec<T>>) -> Result<Var> {
        let (nv, ov) = (self.value(new), self.value(old));
        let (rows, cols) = dims2("blend", nv)?;
        if nv.shape() != ov.shape() || mask.len() != rows {
            return Err(shape_err("blend", &[nv.shape(), ov.shape(), &[mask.len()]]));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let m = mask[r];
            let (a, b) = (nv.row(r), ov.row(r));
            data.extend(a.iter().zip(b).map(|(&x, &y)| m * x + (T::ONE - m) * y));
        }
        self.push(
            "blend",
            Tensor::new(vec![rows, cols], data)?,
            Op::Blend { new, old, mask },
        )
    }

    /// Concatenates rank-2 tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = dims2("concat", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat", self.value(p))?;
            if r != rows {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(shape_err("concat", &shapes));
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
        self.push(
            "concat",
            Tensor::new(vec![rows, total], data)?,
            Op::Concat(parts.to_vec()),
        )
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2("slice", xv)?;
        if start + len > cols {
            return Err(shape_err("slice", &[xv.shape(), &[start, len]]));
        }
        let data = (0..rows)
            .flat_map(|r| xv.row(r)[start..start + len].iter().copied())
            .collect();
        self.push(
            "slice",
            Tensor::new(vec![rows, len], data)?,
            Op::Slice { input: x, start },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(T::sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(T::tanh);
        self.push("tanh", t, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push("relu", t, Op::Relu(x))
    }

    /// Softmax along `axis` of a tensor of any rank.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", &[&shape, &[axis]]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = xv.data();
        let mut data = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(src[at(0)], T::max);
                let mut sum = T::ZERO;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / sum;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::new(shape, data)?,
            Op::Softmax { input: x, axis },
        )
    }

    /// Log-softmax along the last axis of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2("log_softmax", xv)?;
        let mut data = vec![T::ZERO; rows * cols];
        for (r, out) in data.chunks_mut(cols).enumerate() {
            log_softmax_row(xv.row(r), out);
        }
        self.push(
            "log_softmax",
            Tensor::new(vec![rows, cols], data)?,
            Op::LogSoftmax(x),
        )
    }

    /// Row softmax restricted to positions where `mask` is nonzero; masked
    /// entries are exactly zero. `mask` has one row per input row, or a single
    /// row shared by all.
    pub fn masked_softmax(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2("masked_softmax", xv)?;
        if mask.len() != cols && mask.len() != rows * cols {
            return Err(shape_err("masked_softmax", &[xv.shape(), &[mask.len()]]));
        }
        let mut data = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            let m = if mask.len() == cols {
                mask
            } else {
                &mask[r * cols..(r + 1) * cols]
            };
            let row = xv.row(r);
            let live = || (0..cols).filter(|&j| m[j] != T::ZERO);
            let Some(max) = live().map(|j| row[j]).reduce(T::max) else {
                continue;
            };
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut sum = T::ZERO;
            for j in live() {
                out[j] = (row[j] - max).exp();
                sum += out[j];
            }
            for j in live() {
                out[j] = out[j] / sum;
            }
        }
        self.push(
            "masked_softmax",
            Tensor::new(vec![rows, cols], data)?,
            Op::MaskedSoftmax(x),
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = dims2("embedding_gather", tv)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err("embedding_gather", &[tv.shape(), &[bad]]));
        }
        let data = ids
            .iter()
            .flat_map(|&i| tv.row(i).iter().copied())
            .collect();
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push(
            "embedding_gather",
            Tensor::new(vec![ids.len(), cols], data)?,
            op,
        )
    }

    /// Stacks `S` rank-2 `[B, D]` tensors into `[B, S, D]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let (b, d) = dims2("stack", self.value(parts[0]))?;
        for &p in parts {
            if self.shape(p) != [b, d] {
                return Err(shape_err("stack", &[&[b, d], self.shape(p)]));
            }
        }
        let s = parts.len();
        let mut data = vec![T::ZERO; b * s * d];
        for (j, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            for r in 0..b {
                data[(r * s + j) * d..(r * s + j + 1) * d].copy_from_slice(pv.row(r));
            }
        }
        self.push(
            "stack",
            Tensor::new(vec![b, s, d], data)?,
            Op::Stack(parts.to_vec()),
        )
    }

    /// Dot-product scores `[B, S]` of queries `[B, D]` against keys
    /// `[B, S, D]` (or `[1, S, D]`, broadcast over the batch).
    pub fn attn_scores(&mut self, query: Var, keys: Var) -> Result<Var> {
        let (qv, kv) = (self.value(query), self.value(keys));
        let (b, d) = dims2("attn_scores", qv)?;
        let (kb, s, kd) = dims3("attn_scores", kv)?;
        if kd != d || (kb != b && kb != 1) {
            return Err(shape_err("attn_scores", &[qv.shape(), kv.shape()]));
        }
        let mut data = vec![T::ZERO; b * s];
        for r in 0..b {
            let q = qv.row(r);
            let kr = if kb == 1 { 0 } else { r };
            for j in 0..s {
                let k = &kv.data()[(kr * s + j) * d..(kr * s + j + 1) * d];
                data[r * s + j] = q.iter().zip(k).map(|(&x, &y)| x * y).sum();
            }
        }
        self.push(
            "attn_scores",
            Tensor::new(vec![b, s], data)?,
            Op::AttnScores { query, keys },
        )
    }

    /// Weighted sum `[B, D]` of values `[B, S, D]` (or `[1, S, D]`).
    pub fn attn_context(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        let (b, s) = dims2("attn_context", wv)?;
        let (vb, vs, d) = dims3("attn_context", vv)?;
        if vs != s || (vb != b && vb != 1) {
            return Err(shape_err("attn_context", &[wv.shape(), vv.shape()]));
        }
        let mut data = vec![T::ZERO; b * d];
        for r in 0..b {
            let vr = if vb == 1 { 0 } else { r };
            let out = &mut data[r * d..(r + 1) * d];
            for j in 0..s {
                let w = wv.data()[r * s + j];
                let v = &vv.data()[(vr * s + j) * d..(vr * s + j + 1) * d];
                for (o, &x) in out.iter_mut().zip(v) {
                    *o += w * x;
                }
            }
        }
        self.push(
            "attn_context",
            Tensor::new(vec![b, d], data)?,
            Op::AttnContext { weights, values },
        )
    }

    /// Fused LSTM cell. `gates` is `[B, 4H]` pre-activations in (input,
    /// forget, candidate, output) order; returns `[B, 2H]` = `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, cell: Var) -> Result<Var> {
        let (gv, cv) = (self.value(gates), self.value(cell));
        let (b, g4) = dims2("lstm_cell", gv)?;
        let h = g4 / 4;
        if g4 % 4 != 0 || cv.shape() != [b, h] {
            return Err(shape_err("lstm_cell", &[gv.shape(), cv.shape()]));
        }
        let mut acts = vec![T::ZERO; b * g4];
        let mut data = vec![T::ZERO; b * 2 * h];
        for r in 0..b {
            let pre = gv.row(r);
            let a = &mut acts[r * g4..(r + 1) * g4];
            for j in 0..h {
                a[j] = pre[j].sigmoid();
                a[h + j] = pre[h + j].sigmoid();
                a[2 * h + j] = pre[2 * h + j].tanh();
                a[3 * h + j] = pre[3 * h + j].sigmoid();
            }
            let c_prev = cv.row(r);
            let out = &mut data[r * 2 * h..(r + 1) * 2 * h];
            for j in 0..h {
                let c = a[h + j] * c_prev[j] + a[j] * a[2 * h + j];
                out[h + j] = c;
                out[j] = a[3 * h + j] * c.tanh();
            }
        }
        self.push(
            "lstm_cell",
            Tensor::new(vec![b, 2 * h], data)?,
            Op::LstmCell { gates, cell, acts },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("reduce_sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s: T = xv.data().iter().copied().sum();
        let m = s / T::from_f64(xv.len() as f64);
        self.push("reduce_mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Identity in evaluation mode or when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::ZERO } else { keep })
            .collect();
        self.mul_const(x, Arc::new(mask))
    }

    /// Summed (weighted) cross-entropy of row-wise softmax(logits) against
    /// label-smoothed one-hot targets: `1 - smoothing` on the gold id and
    /// `smoothing / (V - 1)` elsewhere. Rows with weight 0 are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        weights: &[T],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = dims2("cross_entropy", lv)?;
        if targets.len() != n || weights.len() != n || v < 2 || targets.iter().any(|&t| t >= v) {
            return Err(shape_err(
                "cross_entropy",
                &[lv.shape(), &[targets.len()], &[weights.len()]],
            ));
        }
        let eps = T::from_f64(smoothing);
        let off = eps / T::from_f64((v - 1) as f64);
        let mut probs = vec![T::ZERO; n * v];
        let mut total = T::ZERO;
        let mut logp = vec![T::ZERO; v];
        for r in 0..n {
            log_softmax_row(lv.row(r), &mut logp);
            for (p, &lp) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
            if weights[r] == T::ZERO {
                continue;
            }
            let gold = logp[targets[r]];
            let mut row_loss = -(T::ONE - eps) * gold;
            if smoothing != 0.0 {
                let rest: T = logp.iter().copied().sum::<T>() - gold;
                row_loss -= off * rest;
            }
            total += weights[r] * row_loss;
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            smoothing: eps,
            weights: weights.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(total), op)
    }

    /// Summed (weighted) cross-entropy of softmax(logits) against explicit
    /// target distributions `[N, V]`.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        target: Arc<Tensor<T>>,
        weights: &[T],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = dims2("soft_cross_entropy", lv)?;
        if target.shape() != lv.shape() || weights.len() != n {
            return Err(shape_err(
                "soft_cross_entropy",
                &[lv.shape(), target.shape(), &[weights.len()]],
            ));
        }
        let mut probs = vec![T::ZERO; n * v];
        let mut total = T::ZERO;
        let mut logp = vec![T::ZERO; v];
        for r in 0..n {
            log_softmax_row(lv.row(r), &mut logp);
            for (p, &lp) in probs[r * v..(r + 1) * v].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
            if weights[r] != T::ZERO {
                let ce: T = target
                    .row(r)
                    .iter()
                    .zip(&logp)
                    .map(|(&q, &lp)| q * lp)
                    .sum();
                total -= weights[r] * ce;
            }
        }
        let op = Op::SoftCrossEntropy {
            logits,
            target,
            weights: weights.to_vec(),
            probs,
        };
        self.push("soft_cross_entropy", Tensor::scalar(total), op)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let n = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![T::ZERO; n])
            }};
        }
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims2("matmul", av)?;
                let n = bv.shape()[1];
                // dA = dC * B^T
                T::gemm(
                    m,
                    n,
                    k,
                    g,
                    n as isize,
                    1,
                    bv.data(),
                    1,
                    n as isize,
                    T::ONE,
                    acc!(*a),
                );
                // dB = A^T * dC
                T::gemm(
                    k,
                    m,
                    n,
                    av.data(),
                    1,
                    k as isize,
                    g,
                    n as isize,
                    1,
                    T::ONE,
                    acc!(*b),
                );
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                for (d, &x) in acc!(*b).iter_mut().zip(g) {
                    *d -= x;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for ((d, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                    *d += x * y;
                }
                for ((d, &x), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                    *d += x * y;
                }
            }
            Op::AddBias(x, bias) => {
                add_into(acc!(*x), g);
                let db = acc!(*bias);
                let n = db.len();
                for row in g.chunks(n) {
                    add_into(db, row);
                }
            }
            Op::Scale(x, s) => {
                for (d, &v) in acc!(*x).iter_mut().zip(g) {
                    *d += *s * v;
                }
            }
            Op::MulConst(x, c) => {
                for ((d, &v), &m) in acc!(*x).iter_mut().zip(g).zip(c.iter()) {
                    *d += v * m;
                }
            }
            Op::Blend { new, old, mask } => {
                let cols = g.len() / mask.len();
                for (r, &m) in mask.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    if m != T::ZERO {
                        for (d, &v) in acc!(*new)[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                            *d += m * v;
                        }
                    }
                    if m != T::ONE {
                        for (d, &v) in acc!(*old)[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                            *d += (T::ONE - m) * v;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.shape()[1];
                let rows = out.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let d = acc!(p);
                    for r in 0..rows {
                        add_into(
                            &mut d[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                        );
                    }
                    offset += w;
                }
            }
            Op::Slice { input, start } => {
                let cols = self.shape(*input)[1];
                let w = out.shape()[1];
                let d = acc!(*input);
                for (r, gr) in g.chunks(w).enumerate() {
                    add_into(&mut d[r * cols + start..r * cols + start + w], gr);
                }
            }
            Op::Sigmoid(x) => {
                for ((d, &v), &y) in acc!(*x).iter_mut().zip(g).zip(out.data()) {
                    *d += v * y * (T::ONE - y);
                }
            }
            Op::Tanh(x) => {
                for ((d, &v), &y) in acc!(*x).iter_mut().zip(g).zip(out.data()) {
                    *d += v * (T::ONE - y * y);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                for ((d, &v), &a) in acc!(*x).iter_mut().zip(g).zip(xv) {
                    if a > T::ZERO {
                        *d += v;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let d = acc!(*input);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(input) => {
                let cols = out.shape()[1];
                let d = acc!(*input);
                for (r, (yr, gr)) in out.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &v)| y * v).sum();
                    for j in 0..cols {
                        d[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(input) => {
                let cols = out.shape()[1];
                let d = acc!(*input);
                for (r, (yr, gr)) in out.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..cols {
                        d[r * cols + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.shape(*table)[1];
                let d = acc!(*table);
                for (gr, &id) in g.chunks(cols).zip(ids) {
                    add_into(&mut d[id * cols..(id + 1) * cols], gr);
                }
            }
            Op::Stack(parts) => {
                let (b, s, dim) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                for (j, &p) in parts.iter().enumerate() {
                    let d = acc!(p);
                    for r in 0..b {
                        add_into(
                            &mut d[r * dim..(r + 1) * dim],
                            &g[(r * s + j) * dim..(r * s + j + 1) * dim],
                        );
                    }
                }
            }
            Op::AttnScores { query, keys } => {
                let (qv, kv) = (self.value(*query), self.value(*keys));
                let (b, dim) = (qv.shape()[0], qv.shape()[1]);
                let (kb, s) = (kv.shape()[0], kv.shape()[1]);
                let mut dq = vec![T::ZERO; b * dim];
                let mut dk = vec![T::ZERO; kv.len()];
                for r in 0..b {
                    let kr = if kb == 1 { 0 } else { r };
                    let q = qv.row(r);
                    for j in 0..s {
                        let gs = g[r * s + j];
                        let base = (kr * s + j) * dim;
                        let k = &kv.data()[base..base + dim];
                        for t in 0..dim {
                            dq[r * dim + t] += gs * k[t];
                            dk[base + t] += gs * q[t];
                        }
                    }
                }
                add_into(acc!(*query), &dq);
                add_into(acc!(*keys), &dk);
            }
            Op::AttnContext { weights, values } => {
                let (wv, vv) = (self.value(*weights), self.value(*values));
                let (b, s) = (wv.shape()[0], wv.shape()[1]);
                let (vb, dim) = (vv.shape()[0], vv.shape()[2]);
                let mut dw = vec![T::ZERO; b * s];
                let mut dv = vec![T::ZERO; vv.len()];
                for r in 0..b {
                    let vr = if vb == 1 { 0 } else { r };
                    let gr = &g[r * dim..(r + 1) * dim];
                    for j in 0..s {
                        let base = (vr * s + j) * dim;
                        let v = &vv.data()[base..base + dim];
                        dw[r * s + j] = gr.iter().zip(v).map(|(&a, &b)| a * b).sum();
                        let w = wv.data()[r * s + j];
                        for t in 0..dim {
                            dv[base + t] += w * gr[t];
                        }
                    }
                }
                add_into(acc!(*weights), &dw);
                add_into(acc!(*values), &dv);
            }
            Op::LstmCell { gates, cell, acts } => {
                let cv = self.value(*cell);
                let (b, h) = (cv.shape()[0], cv.shape()[1]);
                let mut dgates = vec![T::ZERO; b * 4 * h];
                let mut dcell = vec![T::ZERO; b * h];
                for r in 0..b {
                    let a = &acts[r * 4 * h..(r + 1) * 4 * h];
                    let o = out.row(r);
                    let gr = &g[r * 2 * h..(r + 1) * 2 * h];
                    let c_prev = cv.row(r);
                    let dg = &mut dgates[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let (i, f, cand, og) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j]);
                        let tc = o[h + j].tanh();
                        let dh = gr[j];
                        let dc = gr[h + j] + dh * og * (T::ONE - tc * tc);
                        dg[j] = dc * cand * i * (T::ONE - i);
                        dg[h + j] = dc * c_prev[j] * f * (T::ONE - f);
                        dg[2 * h + j] = dc * i * (T::ONE - cand * cand);
                        dg[3 * h + j] = dh * tc * og * (T::ONE - og);
                        dcell[r * h + j] = dc * f;
                    }
                }
                add_into(acc!(*gates), &dgates);
                add_into(acc!(*cell), &dcell);
            }
            Op::Sum(x) => {
                let s = g[0];
                for d in acc!(*x).iter_mut() {
                    *d += s;
                }
            }
            Op::Mean(x) => {
                let d = acc!(*x);
                let s = g[0] / T::from_f64(d.len() as f64);
                for v in d.iter_mut() {
                    *v += s;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                weights,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let off = *smoothing / T::from_f64((v - 1) as f64);
                let d = acc!(*logits);
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::ZERO {
                        continue;
                    }
                    let scale = g[0] * w;
                    for k in 0..v {
                        let y = if k == t { T::ONE - *smoothing } else { off };
                        d[r * v + k] += scale * (probs[r * v + k] - y);
                    }
                }
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                weights,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let d = acc!(*logits);
                for (r, &w) in weights.iter().enumerate() {
                    if w == T::ZERO {
                        continue;
                    }
                    let q = target.row(r);
                    let mass: T = q.iter().copied().sum();
                    let scale = g[0] * w;
                    for k in 0..v {
                        d[r * v + k] += scale * (probs[r * v + k] * mass - q[k]);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf, zero if the leaf did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every registered parameter, keyed by name. Parameters used
    /// more than once on the tape have their contributions summed.
    pub fn params(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            let shape = self.shapes[v.0].clone();
            let g = self.grads[v.0]
                .take()
                .unwrap_or_else(|| vec![T::ZERO; shape.iter().product()]);
            match out.get_mut(&name) {
                Some(existing) => add_into(existing.data_mut(), &g),
                None => {
                    out.insert(name, Tensor { shape, data: g });
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_zero_is_identity() {
        let mut tape = Tape::<f64>::new().training(true);
        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.0, 4.0]));
        let mut rng = crate::tensor::seeded_rng(0, &[]);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::<f64>::new().training(true);
        let x = tape.constant(t(&[1, 1000], &[1.0; 1000]));
        let mut rng = crate::tensor::seeded_rng(3, &[]);
        let y = tape.dropout(x, 0.25, &mut rng).unwrap();
        let vals = tape.value(y).data();
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        let dropped = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped), "{dropped}");

        let mut eval = Tape::<f64>::new();
        let x = eval.constant(t(&[2], &[1.0, 2.0]));
        assert_eq!(eval.dropout(x, 0.5, &mut rng).unwrap(), x);
        assert!(eval.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param("x", Arc::new(t(&[3], &[1.0, -4.0, 2.5])));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Arc::new(t(&[2], &[1.0, 2.0])));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param("x", Arc::new(t(&[3], &[0.3, 0.1, -1.0])));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn untouched_params_get_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param("x", Arc::new(t(&[2], &[1.0, 2.0])));
        tape.param("unused", Arc::new(t(&[2, 2], &[1.0; 4])));
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap().params();
        assert_eq!(grads["unused"], Tensor::zeros(&[2, 2]));
        assert_eq!(grads["x"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_detected() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(
            tape.add(a, a),
            Err(Error::NonFinite { op: "add" })
        ));
    }

    #[test]
    fn masked_softmax_zeroes_masked() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 50.0, 0.5, 0.5, 0.5]));
        let y = tape
            .masked_softmax(x, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0])
            .unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[2], 0.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..], &[1.0, 0.0, 0.0]);
    }
}
