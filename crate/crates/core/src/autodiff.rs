//! Reverse-mode differentiation over a flat tape.
//!
//! A [`Graph`] records every op as it is evaluated. Each node owns its value
//! plus whatever the op needs to compute its adjoint, and [`Graph::backward`]
//! walks the tape once in reverse. Only the ops the model uses are supported.

use crate::error::{Error, Result};
use crate::tensor::{
    gelu, gelu_grad, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, softmax_rows_into, ConvT2d, Scalar, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    ConvTranspose { x: Var, w: Var, geom: ConvT2d },
    Conv1x1 { x: Var, w: Var, b: Var },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Var, Tensor<F>),
    SoftCrossEntropy { logits: Var, target: Vec<F>, probs: Vec<F> },
    LogMse { pred: Var, target: Tensor<F>, channels: Vec<bool>, scale: F, mse: F, count: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Tape of evaluated ops.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient is computed for it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    fn ensure_finite(&self, v: Var, what: &str) -> Result<Var> {
        if self.nodes[v.0].value.all_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("non-finite values produced by {what}")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape(format!("add of {:?} and {:?}", va.dims(), vb.dims())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `x[…×D] + bias[D]`, the only broadcast the engine supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.dims() != [d] {
            return Err(Error::shape(format!("bias {:?} does not match {:?}", vb.dims(), vx.dims())));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o = *o + b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis with row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.last_dim();
        let mut out = Tensor::zeros(vx.dims());
        softmax_rows_into(vx.data(), cols, out.data_mut());
        let v = self.push(out, Op::SoftmaxRows(x), &[x]);
        self.ensure_finite(v, "softmax")
    }

    /// Per-row normalisation over the last axis followed by `gamma·x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if self.value(gamma).dims() != [d] || self.value(beta).dims() != [d] {
            return Err(Error::shape(format!("layernorm affine params must have dims [{d}]")));
        }
        let rows = vx.len() / d;
        let mut xhat = vec![F::zero(); vx.len()];
        let mut rstd = vec![F::zero(); rows];
        let n = F::lit(d as f64);
        for (r, (xr, hr)) in vx.data().chunks(d).zip(xhat.chunks_mut(d)).enumerate() {
            let mean = xr.iter().copied().sum::<F>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * rs;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Tensor::zeros(vx.dims());
        for (or, hr) in out.data_mut().chunks_mut(d).zip(xhat.chunks(d)) {
            for i in 0..d {
                or[i] = g[i] * hr[i] + b[i];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Transposed 2-D convolution, `x: Cin×H×W`, `w: Cin×Cout×k×k`, no bias.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvT2d::infer(self.dims(x), self.dims(w), stride, pad)?;
        let data = geom.forward(self.value(x).data(), self.value(w).data());
        let out = Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], data)?;
        Ok(self.push(out, Op::ConvTranspose { x, w, geom }, &[x, w]))
    }

    /// 1×1 convolution, `x: Cin×H×W`, `w: Cout×Cin`, `b: Cout`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let [c_in, h, wd] = *vx.dims() else {
            return Err(Error::shape(format!("conv1x1 input must be C×H×W, got {:?}", vx.dims())));
        };
        let (c_out, wc_in) = vw.shape2()?;
        if wc_in != c_in || vb.dims() != [c_out] {
            return Err(Error::shape(format!(
                "conv1x1 weight {:?}/bias {:?} do not match input {:?}",
                vw.dims(),
                vb.dims(),
                vx.dims()
            )));
        }
        let hw = h * wd;
        let mut out = vec![F::zero(); c_out * hw];
        for (co, row) in out.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|o| *o = vb.data()[co]);
        }
        matmul_acc(vw.data(), vx.data(), &mut out, c_out, c_in, hw);
        let out = Tensor::new(vec![c_out, h, wd], out)?;
        Ok(self.push(out, Op::Conv1x1 { x, w, b }, &[x, w, b]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(Error::shape("gather_rows needs at least one index"));
        }
        let out = self.value(x).gather_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Concatenate along the first (token) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let tail = self.dims(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.dims()[1..] != tail[..] {
                return Err(Error::shape(format!("concat_rows trailing dims differ: {:?}", v.dims())));
            }
            rows += v.dims()[0];
            data.extend_from_slice(v.data());
        }
        let mut dims = vec![rows];
        dims.extend(tail);
        let out = Tensor::new(dims, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.shape2()?;
        if start >= end || end > c {
            return Err(Error::shape(format!("column slice {start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in vx.data().chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(vec![r, w], data)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let (rows, _) = self.value(*first).shape2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).shape2()?;
            if r != rows {
                return Err(Error::shape("concat_cols row counts differ"));
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
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(dims)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / F::lit(v.len() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// `Σ x_i · w_i` against a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<F>) -> Result<Var> {
        let v = self.value(x);
        if v.dims() != weights.dims() {
            return Err(Error::shape("weighted_sum weights must match the input shape"));
        }
        let s = v.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, weights), &[x]))
    }

    /// Cross-entropy of `softmax(logits)` against a target distribution.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Vec<F>) -> Result<Var> {
        let v = self.value(logits);
        if v.len() != target.len() {
            return Err(Error::shape(format!("{} logits but a {}-class target", v.len(), target.len())));
        }
        let mut probs = vec![F::zero(); v.len()];
        softmax_rows_into(v.data(), v.len(), &mut probs);
        let max = v.data().iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + v.data().iter().map(|&z| (z - max).exp()).sum::<F>().ln();
        let loss = target.iter().zip(v.data()).map(|(&q, &z)| q * (lse - z)).sum();
        let out = self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, target, probs }, &[logits]);
        self.ensure_finite(out, "cross-entropy")
    }

    /// `ln(1 + scale · MSE)` over the cells of the channels flagged in `channels`.
    /// Returns `Ok(None)` when no channel is flagged.
    pub fn log_mse(&mut self, pred: Var, target: Tensor<F>, channels: Vec<bool>, scale: F) -> Result<Option<Var>> {
        let v = self.value(pred);
        if v.dims() != target.dims() || v.dims()[0] != channels.len() {
            return Err(Error::shape(format!(
                "heatmap prediction {:?} vs target {:?} ({} channel flags)",
                v.dims(),
                target.dims(),
                channels.len()
            )));
        }
        let cells = v.len() / channels.len();
        let mut sq = F::zero();
        let mut count = 0usize;
        for (c, &on) in channels.iter().enumerate() {
            if !on {
                continue;
            }
            let range = c * cells..(c + 1) * cells;
            for (&p, &t) in v.data()[range.clone()].iter().zip(&target.data()[range]) {
                sq = sq + (p - t) * (p - t);
            }
            count += cells;
        }
        if count == 0 {
            return Ok(None);
        }
        let mse = sq / F::lit(count as f64);
        let loss = (F::one() + scale * mse).ln();
        let op = Op::LogMse { pred, target, channels, scale, mse, count };
        let out = self.push(Tensor::scalar(loss), op, &[pred]);
        self.ensure_finite(out, "heatmap loss").map(Some)
    }

    /// Gradients of scalar node `loss` with respect to every node that needs them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.dims(loss), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let mut acc = |v: Var, delta: Tensor<F>, nodes: &[Node<F>]| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).shape2().expect("2-D");
                let n = val(*b).dims()[1];
                if nodes[a.0].needs_grad {
                    let mut da = vec![F::zero(); m * k];
                    matmul_a_bt_acc(g.data(), val(*b).data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(vec![m, k], da).expect("dims"), nodes);
                }
                if nodes[b.0].needs_grad {
                    let mut db = vec![F::zero(); k * n];
                    matmul_at_b_acc(val(*a).data(), g.data(), &mut db, m, k, n);
                    acc(*b, Tensor::new(vec![k, n], db).expect("dims"), nodes);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose2().expect("2-D"), nodes),
            Op::Add(a, b) => {
                acc(*a, g.clone(), nodes);
                acc(*b, g.clone(), nodes);
            }
            Op::AddBias(x, b) => {
                acc(*x, g.clone(), nodes);
                let d = g.last_dim();
                let mut db = vec![F::zero(); d];
                for row in g.data().chunks(d) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                acc(*b, Tensor::new(vec![d], db).expect("dims"), nodes);
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * *s), nodes),
            Op::Gelu(x) => {
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(val(*x).data()) {
                    *d = *d * gelu_grad(xv);
                }
                acc(*x, dx, nodes);
            }
            Op::SoftmaxRows(x) => {
                let y = &nodes[i].value;
                let cols = y.last_dim();
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: F = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in dr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                acc(*x, dx, nodes);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = g.last_dim();
                let gam = val(*gamma).data();
                let n = F::lit(d as f64);
                let mut dx = vec![F::zero(); g.len()];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for (r, ((gr, hr), dxr)) in g.data().chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                        dgamma[j] = dgamma[j] + gr[j] * hr[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    mean_dh = mean_dh / n;
                    mean_dh_h = mean_dh_h / n;
                    for j in 0..d {
                        dxr[j] = rstd[r] * (gr[j] * gam[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                acc(*x, Tensor::new(g.dims().to_vec(), dx).expect("dims"), nodes);
                acc(*gamma, Tensor::new(vec![d], dgamma).expect("dims"), nodes);
                acc(*beta, Tensor::new(vec![d], dbeta).expect("dims"), nodes);
            }
            Op::ConvTranspose { x, w, geom } => {
                let (dx, dw) = geom.backward(val(*x).data(), val(*w).data(), g.data());
                acc(*x, Tensor::new(val(*x).dims().to_vec(), dx).expect("dims"), nodes);
                acc(*w, Tensor::new(val(*w).dims().to_vec(), dw).expect("dims"), nodes);
            }
            Op::Conv1x1 { x, w, b } => {
                let [c_in, h, wd] = *val(*x).dims() else { unreachable!() };
                let c_out = val(*w).dims()[0];
                let hw = h * wd;
                let mut dx = vec![F::zero(); c_in * hw];
                matmul_at_b_acc(val(*w).data(), g.data(), &mut dx, c_out, c_in, hw);
                let mut dw = vec![F::zero(); c_out * c_in];
                matmul_a_bt_acc(g.data(), val(*x).data(), &mut dw, c_out, hw, c_in);
                let db = g.data().chunks(hw).map(|r| r.iter().copied().sum()).collect();
                acc(*x, Tensor::new(vec![c_in, h, wd], dx).expect("dims"), nodes);
                acc(*w, Tensor::new(vec![c_out, c_in], dw).expect("dims"), nodes);
                acc(*b, Tensor::new(vec![c_out], db).expect("dims"), nodes);
            }
            Op::GatherRows(x, idx) => {
                let mut dx = Tensor::zeros(val(*x).dims());
                let stride = g.len() / idx.len();
                for (k, &r) in idx.iter().enumerate() {
                    let src = &g.data()[k * stride..(k + 1) * stride];
                    let dst = &mut dx.data_mut()[r * stride..(r + 1) * stride];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                acc(*x, dx, nodes);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let part = Tensor::new(val(p).dims().to_vec(), g.data()[offset..offset + n].to_vec());
                    acc(p, part.expect("dims"), nodes);
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = val(*x).shape2().expect("2-D");
                let w = g.last_dim();
                let mut dx = vec![F::zero(); r * c];
                for (row, grow) in dx.chunks_mut(c).zip(g.data().chunks(w)) {
                    row[*start..*start + w].copy_from_slice(grow);
                }
                acc(*x, Tensor::new(vec![r, c], dx).expect("dims"), nodes);
            }
            Op::ConcatCols(parts) => {
                let total = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let (r, w) = val(p).shape2().expect("2-D");
                    let mut dp = Vec::with_capacity(r * w);
                    for grow in g.data().chunks(total) {
                        dp.extend_from_slice(&grow[offset..offset + w]);
                    }
                    acc(p, Tensor::new(vec![r, w], dp).expect("dims"), nodes);
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(val(*x).dims()).expect("same size");
                acc(*x, dx, nodes);
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).dims(), g.data()[0]), nodes),
            Op::Mean(x) => {
                let n = F::lit(val(*x).len() as f64);
                acc(*x, Tensor::full(val(*x).dims(), g.data()[0] / n), nodes);
            }
            Op::WeightedSum(x, w) => acc(*x, w.map(|v| v * g.data()[0]), nodes),
            Op::SoftCrossEntropy { logits, target, probs } => {
                let total: F = target.iter().copied().sum();
                let up = g.data()[0];
                let d = probs.iter().zip(target).map(|(&p, &q)| up * (p * total - q)).collect();
                acc(*logits, Tensor::new(val(*logits).dims().to_vec(), d).expect("dims"), nodes);
            }
            Op::LogMse { pred, target, channels, scale, mse, count } => {
                let coef = g.data()[0] * *scale / (F::one() + *scale * *mse) * F::lit(2.0 / *count as f64);
                let p = val(*pred);
                let cells = p.len() / channels.len();
                let mut d = vec![F::zero(); p.len()];
                for (c, &on) in channels.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for j in c * cells..(c + 1) * cells {
                        d[j] = coef * (p.data()[j] - target.data()[j]);
                    }
                }
                acc(*pred, Tensor::new(p.dims().to_vec(), d).expect("dims"), nodes);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
