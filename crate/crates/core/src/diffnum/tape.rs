//! Taped reverse-mode differentiation over [`Tensor`] primitives.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Tape::backward`] walks the record in reverse and
//! accumulates exact gradients. Parameters are borrowed from a
//! [`ParamStore`] so building a tape per sample copies no weights.

use super::params::{ParamId, ParamStore};
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    ConcatLast(Var, Var),
    Transpose(Var),
    Reshape(Var),
    MeanGroups(Var, usize),
    SelectRows(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    MaskedSse {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Output of [`multi_head_attention`]: mixed values plus the attention
/// probabilities laid out as `[groups, heads, T, T]`.
pub struct AttentionOutput {
    pub output: Tensor,
    pub probs: Vec<f64>,
}

/// Multi-head scaled dot-product attention over `groups` independent
/// sequences stacked along the rows of `q`, `k`, `v` (`[groups·T, d]`).
///
/// Head `j` uses columns `j·d/heads .. (j+1)·d/heads`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    groups: usize,
    heads: usize,
) -> Result<AttentionOutput> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "attention: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let (rows, d) = (q.rows(), q.cols());
    if groups == 0 || rows % groups != 0 || heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!(
            "attention: {rows} rows / {groups} groups, {d} dims / {heads} heads"
        )));
    }
    let t = rows / groups;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; groups * heads * t * t];
    for g in 0..groups {
        for h in 0..heads {
            let base = (g * heads + h) * t * t;
            for i in 0..t {
                let qi = &qd[(g * t + i) * d + h * dh..(g * t + i) * d + (h + 1) * dh];
                let prow = &mut probs[base + i * t..base + (i + 1) * t];
                for (j, p) in prow.iter_mut().enumerate() {
                    let kj = &kd[(g * t + j) * d + h * dh..(g * t + j) * d + (h + 1) * dh];
                    *p = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                tensor::softmax_in_place(prow);
                let orow = &mut out[(g * t + i) * d + h * dh..(g * t + i) * d + (h + 1) * dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = &vd[(g * t + j) * d + h * dh..(g * t + j) * d + (h + 1) * dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    Ok(AttentionOutput {
        output: Tensor::new(vec![rows, d], out)?.check_finite("attention")?,
        probs,
    })
}

/// Row-group means: `[groups·size, d] -> [groups, d]`.
pub fn mean_groups(x: &Tensor, size: usize) -> Result<Tensor> {
    if size == 0 || !x.rows().is_multiple_of(size) {
        return Err(Error::Dimension(format!(
            "mean_groups: {} rows not divisible into groups of {size}",
            x.rows()
        )));
    }
    let (groups, d) = (x.rows() / size, x.cols());
    let mut out = vec![0.0; groups * d];
    for g in 0..groups {
        let o = &mut out[g * d..(g + 1) * d];
        for r in 0..size {
            for (a, b) in o.iter_mut().zip(x.row(g * size + r)) {
                *a += b;
            }
        }
        for a in o.iter_mut() {
            *a /= size as f64;
        }
    }
    Tensor::new(vec![groups, d], out)
}

fn dim_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension(format!("{op}: {:?} with {:?}", a.shape(), b.shape()))
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(store.get(id)),
            op: Op::Leaf,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// `x[.., d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(dim_err("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(bv.len()) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let out = out.check_finite("add_row")?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// `x[.., d] ⊙ gain[d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.len() != xv.cols() {
            return Err(dim_err("mul_row", xv, gv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(gv.len()) {
            for (o, g) in row.iter_mut().zip(gv.data()) {
                *o *= g;
            }
        }
        let out = out.check_finite("mul_row")?;
        Ok(self.push(out, Op::MulRow(x, gain)))
    }

    /// `x[r, c] ⊙ g[r, 1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(g));
        if gv.len() != xv.rows() {
            return Err(dim_err("mul_col", xv, gv));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for (row, gi) in out.data_mut().chunks_mut(c).zip(gv.data()) {
            for o in row.iter_mut() {
                *o *= gi;
            }
        }
        let out = out.check_finite("mul_col")?;
        Ok(self.push(out, Op::MulCol(x, g)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = tensor::scale(self.value(x), s)?;
        Ok(self.push(out, Op::Scale(x, s)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = tensor::relu(self.value(x))?;
        Ok(self.push(out, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = tensor::sigmoid(self.value(x))?;
        Ok(self.push(out, Op::Sigmoid(x)))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    pub fn layer_norm_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (out, inv) = tensor::layer_norm_with_inv_std(xv);
        let out = Tensor::new(xv.shape().to_vec(), out)?.check_finite("layer_norm_rows")?;
        Ok(self.push(out, Op::LayerNormRows(x, inv)))
    }

    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_last_dim(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::ConcatLast(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(x))?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn mean_groups(&mut self, x: Var, size: usize) -> Result<Var> {
        let out = mean_groups(self.value(x), size)?;
        Ok(self.push(out, Op::MeanGroups(x, size)))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::Dimension(format!("select_rows: row {bad} of {}", xv.rows())));
        }
        let c = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in &rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(out, Op::SelectRows(x, rows)))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, groups: usize, heads: usize) -> Result<Var> {
        let AttentionOutput { output, probs } =
            multi_head_attention(self.value(q), self.value(k), self.value(v), groups, heads)?;
        Ok(self.push(
            output,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
        ))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    /// Sum of squared errors over cells where `mask` is true. Target values
    /// under a false mask never enter the result.
    pub fn masked_sse(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() || pv.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "masked_sse: prediction of {} cells, target {}, mask {}",
                pv.len(),
                target.len(),
                mask.len()
            )));
        }
        let mut s = 0.0;
        for ((p, t), &m) in pv.data().iter().zip(target).zip(mask) {
            if m {
                s += (p - t) * (p - t);
            }
        }
        let out = Tensor::scalar(s).check_finite("masked_sse")?;
        Ok(self.push(
            out,
            Op::MaskedSse {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar output, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(self.value(out).shape(), 1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.get();
        let val = |v: Var| self.nodes[v.0].value.get();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut da = vec![0.0; m * k];
                tensor::gemm_nt_acc(g.data(), bv.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                tensor::gemm_tn_acc(av.data(), g.data(), &mut db, m, k, n);
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().iter().map(|x| -x).collect());
            }
            Op::AddRow(x, b) => {
                let d = val(*b).len();
                let mut db = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, g.shape(), g.data().to_vec());
                accumulate(grads, *b, val(*b).shape(), db);
            }
            Op::MulRow(x, gain) => {
                let (xv, gv) = (val(*x), val(*gain));
                let d = gv.len();
                let mut dx = g.data().to_vec();
                let mut dg = vec![0.0; d];
                for (drow, xrow) in dx.chunks_mut(d).zip(xv.data().chunks(d)) {
                    for c in 0..d {
                        dg[c] += drow[c] * xrow[c];
                        drow[c] *= gv.data()[c];
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
                accumulate(grads, *gain, gv.shape(), dg);
            }
            Op::MulCol(x, gc) => {
                let (xv, gv) = (val(*x), val(*gc));
                let c = xv.cols();
                let mut dx = g.data().to_vec();
                let mut dg = vec![0.0; gv.len()];
                for (r, (drow, xrow)) in dx.chunks_mut(c).zip(xv.data().chunks(c)).enumerate() {
                    let gi = gv.data()[r];
                    for (dv, xv) in drow.iter_mut().zip(xrow) {
                        dg[r] += *dv * xv;
                        *dv *= gi;
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
                accumulate(grads, *gc, gv.shape(), dg);
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.shape(), g.data().iter().map(|v| v * s).collect());
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let dx = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(d, s)| d * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, out.shape(), dx);
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut dx = vec![0.0; out.len()];
                for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (gv - dot);
                    }
                }
                accumulate(grads, *x, out.shape(), dx);
            }
            Op::LayerNormRows(x, inv) => {
                let c = out.cols();
                let n = c as f64;
                let mut dx = vec![0.0; out.len()];
                for (r, ((drow, grow), yrow)) in dx
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(out.data().chunks(c))
                    .enumerate()
                {
                    let mean_g: f64 = grow.iter().sum::<f64>() / n;
                    let mean_gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = inv[r] * (gv - mean_g - y * mean_gy);
                    }
                }
                accumulate(grads, *x, out.shape(), dx);
            }
            Op::ConcatLast(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (ca, cb) = (av.cols(), bv.cols());
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, av.shape(), da);
                accumulate(grads, *b, bv.shape(), db);
            }
            Op::Transpose(x) => {
                let t = tensor::transpose(g).expect("transpose of a 2-D gradient");
                accumulate(grads, *x, val(*x).shape(), t.into_data());
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, val(*x).shape(), g.data().to_vec());
            }
            Op::MeanGroups(x, size) => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, row) in dx.chunks_mut(d).enumerate() {
                    let grow = g.row(r / size);
                    for (o, v) in row.iter_mut().zip(grow) {
                        *o = v / *size as f64;
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::SelectRows(x, rows) => {
                let xv = val(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in dx[r * d..(r + 1) * d].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, xv.shape(), dx);
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (dq, dk, dv) = attention_backward(qv, kv, vv, *groups, *heads, probs, g);
                accumulate(grads, *q, qv.shape(), dq);
                accumulate(grads, *k, kv.shape(), dk);
                accumulate(grads, *v, vv.shape(), dv);
            }
            Op::Sum(x) => {
                let xv = val(*x);
                accumulate(grads, *x, xv.shape(), vec![g.item(); xv.len()]);
            }
            Op::MaskedSse { pred, target, mask } => {
                let pv = val(*pred);
                let s = g.item();
                let dp = pv
                    .data()
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((p, t), &m)| if m { 2.0 * (p - t) * s } else { 0.0 })
                    .collect();
                accumulate(grads, *pred, pv.shape(), dp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    let incoming = Tensor::new(shape.to_vec(), data).expect("gradient shape matches its value");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&incoming),
        slot @ None => *slot = Some(incoming),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    groups: usize,
    heads: usize,
    probs: &[f64],
    g: &Tensor,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (rows, d) = (q.rows(), q.cols());
    let t = rows / groups;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let mut dp = vec![0.0; t];
    let cell = |r: usize, h: usize| (r * d + h * dh)..(r * d + (h + 1) * dh);
    for gi in 0..groups {
        for h in 0..heads {
            let base = (gi * heads + h) * t * t;
            for i in 0..t {
                let prow = &probs[base + i * t..base + (i + 1) * t];
                let go = &gd[cell(gi * t + i, h)];
                // dP = dO · Vᵀ, dV += Pᵀ · dO
                for j in 0..t {
                    let vj = &vd[cell(gi * t + j, h)];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    for (o, &gv) in dv[cell(gi * t + j, h)].iter_mut().zip(go) {
                        *o += prow[j] * gv;
                    }
                }
                let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qi, kj) = (cell(gi * t + i, h), cell(gi * t + j, h));
                    for c in 0..dh {
                        dq[qi.start + c] += ds * kd[kj.start + c];
                        dk[kj.start + c] += ds * qd[qi.start + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient with respect to `v`, `None` when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// One gradient per parameter of `store`, in store order. Parameters not
    /// on the tape, or disconnected from the output, get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(id)) = (g, p) {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}
