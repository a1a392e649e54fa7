//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value. Nodes are only
//! ever appended, so tape order is a topological order and `backward`
//! replays it in reverse.

use std::collections::HashMap;

use rand::Rng;

use super::{
    axis_split, gelu, gelu_grad_scalar, layer_norm, logsumexp, matmul, moments,
    softmax, ParamId, ParamStore, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation with a hand-written backward rule. The caller computes the
/// forward value; the op only maps an upstream gradient to input gradients.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// One gradient buffer per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax(Var, usize),
    LogSumExp(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Rows(Var, Vec<usize>),
    Transpose(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy(Var, usize),
    Dropout(Var, Vec<f64>),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.values[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.values[v.0].item()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad.as_deref()
    }

    /// A leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// Trainable parameter leaf; repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Parameter leaf excluded from differentiation.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.values[v.0].grad.as_deref().map(|g| (*id, g)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.shape() != [n] {
            return Err(Error::dim("add_row", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::values_only(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect());
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = logsumexp(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSumExp(x, axis), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, rg))
    }

    /// Gathers rows of a matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Contract(format!("row {bad} out of range for {m} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::values_only(vec![rows.len(), n], data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Rows(x, rows.to_vec()), rg))
    }

    /// Embedding lookup: one table row per id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vocab_size = self.value(table).dims2()?.0;
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Vocab { id, vocab_size });
        }
        self.select_rows(table, ids)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let out = Tensor::values_only(vec![n, m], data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims2()?;
        if start + len > n {
            return Err(Error::dim("slice_cols", t.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::values_only(vec![m, len], data);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = self.value(*p).dims2()?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(*p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::values_only(vec![m, n], data);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Left-to-right sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_scalars of an empty list".into()))?;
        let mut acc = *first;
        for t in rest {
            acc = self.add(acc, *t)?;
        }
        Ok(acc)
    }

    /// `-log softmax(logits)[class]`; logits is a vector or a single row.
    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != *t.shape().last().unwrap_or(&0) {
            return Err(Error::Contract(format!(
                "cross_entropy expects one logit row, got {:?}",
                t.shape()
            )));
        }
        let loss = super::cross_entropy(t.data(), class)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, class), rg))
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let t = self.value(x);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::values_only(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::Dropout(x, mask), rg)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    /// Back-propagates from a scalar `loss`. Afterwards every node that
    /// requires a gradient carries one (zeros if unreachable from `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.0].is_scalar() {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.values[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, g) in grads.into_iter().enumerate() {
            let t = &mut self.values[i];
            t.grad = if t.requires_grad {
                Some(g.unwrap_or_else(|| vec![0.0; t.numel()]))
            } else {
                None
            };
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.values[v.0];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.values[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.values[v.0].numel()]);
            f(buf);
        };

        match &self.ops[i] {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                // dA = G · Bᵀ
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let grow = &g[r * n..(r + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |gb| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let grow = &g[r * n..(r + 1) * n];
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let n = val(*b).numel();
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
            Op::Gelu(x) => {
                let xd = val(*x).data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        gx[j] += g[j] * gelu_grad_scalar(xd[j]);
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let y = &self.values[i];
                let (outer, len, inner) = axis_split(y.shape(), *axis).expect("axis checked in forward");
                let yd = y.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + c;
                            let dotp: f64 = (0..len).map(|j| yd[idx(j)] * g[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += yd[idx(j)] * (g[idx(j)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp(x, axis) => {
                let out = self.values[i].data();
                let xt = val(*x);
                let (outer, len, inner) = axis_split(xt.shape(), *axis).expect("axis checked in forward");
                let xd = xt.data();
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for c in 0..inner {
                            let r = o * inner + c;
                            for j in 0..len {
                                let idx = (o * len + j) * inner + c;
                                gx[idx] += g[r] * (xd[idx] - out[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xt = val(*x);
                let h = *xt.shape().last().expect("rank checked in forward");
                let gam = val(*gamma).data();
                let xd = xt.data();
                let rows = xd.len() / h;
                let mut gx_all = vec![0.0; xd.len()];
                let mut ggamma = vec![0.0; h];
                let mut gbeta = vec![0.0; h];
                for r in 0..rows {
                    let row = &xd[r * h..(r + 1) * h];
                    let grow = &g[r * h..(r + 1) * h];
                    let (mean, inv) = moments(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = (0..h).map(|j| grow[j] * gam[j]).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let hf = h as f64;
                    for j in 0..h {
                        gx_all[r * h + j] = inv / hf * (hf * dxhat[j] - s1 - xhat[j] * s2);
                        ggamma[j] += grow[j] * xhat[j];
                        gbeta[j] += grow[j];
                    }
                }
                acc(*x, &mut |gx| add_into(gx, &gx_all));
                acc(*gamma, &mut |gg| add_into(gg, &ggamma));
                acc(*beta, &mut |gb| add_into(gb, &gbeta));
            }
            Op::Rows(x, rows) => {
                let n = val(*x).shape()[1];
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let n = val(*x).shape()[1];
                let len = self.values[i].shape()[1];
                acc(*x, &mut |gx| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = self.values[i].shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).shape()[1];
                    acc(*p, &mut |gp| {
                        for (r, grow) in g.chunks(n).enumerate() {
                            add_into(&mut gp[r * w..(r + 1) * w], &grow[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::CrossEntropy(logits, class) => {
                let ld = val(*logits).data();
                let lse = super::logsumexp_slice(ld);
                acc(*logits, &mut |gl| {
                    for j in 0..ld.len() {
                        let p = (ld[j] - lse).exp();
                        gl[j] += g[0] * (p - if j == *class { 1.0 } else { 0.0 });
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |gx| {
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }),
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let input_grads = op.backward(&ins, &self.values[i], g);
                for (v, gi) in inputs.iter().zip(input_grads) {
                    acc(*v, &mut |buf| add_into(buf, &gi));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
