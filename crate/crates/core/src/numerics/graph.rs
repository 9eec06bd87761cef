use std::collections::BTreeMap;

use super::tensor::gemm;
use super::{NumericsError, ParamStore, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// How the second operand of a binary elementwise op is expanded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Prelu(Var, Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    LogSumExp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Mask(Var, Tensor),
    Zoneout { new: Var, prev: Var, keep: Tensor },
    Conv1d { x: Var, w: Var, width: usize },
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Transpose(Var),
    Reshape(Var),
    ShiftRight(Var),
    NormalizeRows { a: Var, sums: Vec<f64> },
}

/// A recording of one evaluation. Parameters are read from a borrowed
/// [`ParamStore`]; gradients are returned separately by [`Graph::backward`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    values: Vec<Tensor>,
    ops: Vec<Op>,
    param_vars: BTreeMap<String, Var>,
}

/// Result of a backward pass: gradients for every node that the loss
/// depends on.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients in name order. Parameters the loss does not
    /// depend on are omitted.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(n, v)| self.grads[v.0].as_ref().map(|g| (n.as_str(), g)))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    let (ar, ac) = a.shape();
    match b.shape() {
        (r, c) if r == ar && c == ac => Ok(Bcast::Same),
        (1, 1) => Ok(Bcast::Scalar),
        (1, c) if c == ac => Ok(Bcast::Row),
        (r, 1) if r == ar => Ok(Bcast::Col),
        _ => Err(mismatch(op, a, b)),
    }
}

#[inline]
fn bidx(kind: Bcast, cols: usize, r: usize, c: usize) -> usize {
    match kind {
        Bcast::Same => r * cols + c,
        Bcast::Row => c,
        Bcast::Col => r,
        Bcast::Scalar => 0,
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = a.shape();
    let mut out = Tensor::zeros(rows, cols);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            od[i] = f(ad[i], bd[bidx(kind, cols, r, c)]);
        }
    }
    out
}

/// Reduce a full-shape gradient down to the broadcast operand's shape.
fn reduce_bcast(g: &Tensor, kind: Bcast, shape: (usize, usize)) -> Tensor {
    match kind {
        Bcast::Same => g.clone(),
        _ => {
            let mut out = Tensor::zeros(shape.0, shape.1);
            let cols = g.cols();
            for r in 0..g.rows() {
                for c in 0..cols {
                    out.data_mut()[bidx(kind, cols, r, c)] += g.get(r, c);
                }
            }
            out
        }
    }
}

fn im2col(x: &Tensor, width: usize) -> Tensor {
    let (t, cin) = x.shape();
    let left = (width - 1) / 2;
    let mut cols = Tensor::zeros(t, width * cin);
    for i in 0..t {
        for k in 0..width {
            let src = i as isize + k as isize - left as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            cols.row_mut(i)[k * cin..(k + 1) * cin].copy_from_slice(x.row(src));
        }
    }
    cols
}

fn col2im(cols: &Tensor, width: usize, cin: usize, out: &mut Tensor) {
    let t = out.rows();
    let left = (width - 1) / 2;
    for i in 0..t {
        for k in 0..width {
            let src = i as isize + k as isize - left as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let src = src as usize;
            let block = &cols.row(i)[k * cin..(k + 1) * cin];
            for (o, v) in out.row_mut(src).iter_mut().zip(block) {
                *o += v;
            }
        }
    }
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

fn slot_mut(slot: &mut Option<Tensor>, shape: (usize, usize)) -> &mut Tensor {
    slot.get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            values: Vec::with_capacity(1024),
            ops: Vec::with_capacity(1024),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    /// Records an input (or constant) tensor.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        Var(self.values.len() - 1)
    }

    /// Leaf for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(name) {
            return Ok(v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?
            .clone();
        self.values.push(value);
        self.ops.push(Op::Param);
        let v = Var(self.values.len() - 1);
        self.param_vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, ta.data(), false, tb.data(), false, out.data_mut(), false);
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("add", &self.values[a.0], &self.values[b.0])?;
        let out = binary(&self.values[a.0], &self.values[b.0], kind, |x, y| x + y);
        self.push(out, Op::Add(a, b, kind), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("sub", &self.values[a.0], &self.values[b.0])?;
        let out = binary(&self.values[a.0], &self.values[b.0], kind, |x, y| x - y);
        self.push(out, Op::Sub(a, b, kind), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("mul", &self.values[a.0], &self.values[b.0])?;
        let out = binary(&self.values[a.0], &self.values[b.0], kind, |x, y| x * y);
        self.push(out, Op::Mul(a, b, kind), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(mismatch("div", ta, tb));
        }
        let out = binary(ta, tb, Bcast::Same, |x, y| x / y);
        self.push(out, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.values[a.0].map(|x| x * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.values[a.0].map(|x| x + s);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    /// Parametric ReLU with a single learned negative slope (`1 × 1`).
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var> {
        let (ta, ts) = (&self.values[a.0], &self.values[slope.0]);
        if ts.shape() != (1, 1) {
            return Err(mismatch("prelu", ta, ts));
        }
        let s = ts.item();
        let out = ta.map(|x| if x > 0.0 { x } else { s * x });
        self.push(out, Op::Prelu(a, slope), "prelu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].map(softplus);
        self.push(out, Op::Softplus(a), "softplus")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].map(|x| x * x);
        self.push(out, Op::Square(a), "square")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// Row-wise log-sum-exp, producing a column.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        let mut out = Tensor::zeros(ta.rows(), 1);
        for r in 0..ta.rows() {
            let row = ta.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
            out.set(r, 0, max + s.ln());
        }
        self.push(out, Op::LogSumExp(a), "logsumexp")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.values[parts[0].0].rows();
        for p in parts {
            if self.values[p.0].rows() != rows {
                return Err(mismatch("concat_cols", &self.values[parts[0].0], &self.values[p.0]));
            }
        }
        let cols: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.values[p.0].row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.values[a.0];
        if len == 0 || start + len > ta.cols() {
            return Err(mismatch("slice_cols", ta, &Tensor::zeros(1, start + len.max(1))));
        }
        let mut out = Tensor::zeros(ta.rows(), len);
        for r in 0..ta.rows() {
            out.row_mut(r).copy_from_slice(&ta.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<Tensor> = parts.iter().map(|p| self.values[p.0].clone()).collect();
        let out = Tensor::vstack(&tensors)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.values[a.0];
        if len == 0 || start + len > ta.rows() {
            return Err(mismatch("slice_rows", ta, &Tensor::zeros(start + len.max(1), 1)));
        }
        let out = ta.slice_rows(start, len);
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    /// Per-row normalisation to zero mean and unit variance (no gain/bias).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = &self.values[a.0];
        let n = ta.cols() as f64;
        let mut out = ta.clone();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std }, "layer_norm")
    }

    /// Elementwise product with a constant mask (dropout application).
    pub fn mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let ta = &self.values[a.0];
        if ta.shape() != mask.shape() {
            return Err(mismatch("mask", ta, &mask));
        }
        let out = binary(ta, &mask, Bcast::Same, |x, m| x * m);
        self.push(out, Op::Mask(a, mask), "mask")
    }

    /// `keep ⊙ prev + (1 − keep) ⊙ new` for a constant zoneout mask.
    pub fn zoneout(&mut self, new: Var, prev: Var, keep: Tensor) -> Result<Var> {
        let (tn, tp) = (&self.values[new.0], &self.values[prev.0]);
        if tn.shape() != tp.shape() || tn.shape() != keep.shape() {
            return Err(mismatch("zoneout", tn, tp));
        }
        let mut out = tn.clone();
        for ((o, p), k) in out.data_mut().iter_mut().zip(tp.data()).zip(keep.data()) {
            *o = k * p + (1.0 - k) * *o;
        }
        self.push(out, Op::Zoneout { new, prev, keep }, "zoneout")
    }

    /// Same-length 1-D convolution along rows with zero padding.
    ///
    /// `x` is `T × C_in`; `w` is `(width · C_in) × C_out` where block `k`
    /// of `w` multiplies input row `t + k − (width − 1) / 2`.
    pub fn conv1d(&mut self, x: Var, w: Var, width: usize) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        if width == 0 || tw.rows() != width * tx.cols() {
            return Err(mismatch("conv1d", tx, tw));
        }
        let cols = im2col(tx, width);
        let (t, cout) = (tx.rows(), tw.cols());
        let mut out = Tensor::zeros(t, cout);
        gemm(t, cols.cols(), cout, cols.data(), false, tw.data(), false, out.data_mut(), false);
        self.push(out, Op::Conv1d { x, w, width }, "conv1d")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.values[a.0].sum());
        self.push(out, Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns of each row: `r × c → r × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        let mut out = Tensor::zeros(ta.rows(), 1);
        for r in 0..ta.rows() {
            out.set(r, 0, ta.row(r).iter().sum());
        }
        self.push(out, Op::SumRows(a), "sum_rows")
    }

    /// Sum down each column: `r × c → 1 × c`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        let mut out = Tensor::zeros(1, ta.cols());
        for r in 0..ta.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(ta.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumCols(a), "sum_cols")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.values[a.0].transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.values[a.0].reshape(rows, cols)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Moves every column one place right, filling column 0 with zeros.
    pub fn shift_right(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.0];
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        for r in 0..ta.rows() {
            let src = ta.row(r);
            out.row_mut(r)[1..].copy_from_slice(&src[..src.len() - 1]);
        }
        self.push(out, Op::ShiftRight(a), "shift_right")
    }

    /// Divides each row by `(row sum + floor)`.
    pub fn normalize_rows(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ta = &self.values[a.0];
        let mut out = ta.clone();
        let mut sums = Vec::with_capacity(ta.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let s = row.iter().sum::<f64>() + floor;
            for v in row.iter_mut() {
                *v /= s;
            }
            sums.push(s);
        }
        self.push(out, Op::NormalizeRows { a, sums }, "normalize_rows")
    }

    /// Reverse pass from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.values[loss.0].shape();
        if shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .map(|(n, v)| (n.clone(), *v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.values[v.0];
        let y = &self.values[i];
        match &self.ops[i] {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let ga = slot_mut(&mut grads[a.0], (m, k));
                gemm(m, n, k, g.data(), false, tb.data(), true, ga.data_mut(), true);
                let gb = slot_mut(&mut grads[b.0], (k, n));
                gemm(k, m, n, ta.data(), true, g.data(), false, gb.data_mut(), true);
            }
            Op::Add(a, b, kind) => {
                add_into(&mut grads[a.0], g.clone());
                add_into(&mut grads[b.0], reduce_bcast(g, *kind, val(*b).shape()));
            }
            Op::Sub(a, b, kind) => {
                add_into(&mut grads[a.0], g.clone());
                let neg = g.map(|v| -v);
                add_into(&mut grads[b.0], reduce_bcast(&neg, *kind, val(*b).shape()));
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (val(*a), val(*b));
                add_into(&mut grads[a.0], binary(g, tb, *kind, |gv, bv| gv * bv));
                let full = binary(g, ta, Bcast::Same, |gv, av| gv * av);
                add_into(&mut grads[b.0], reduce_bcast(&full, *kind, tb.shape()));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                add_into(&mut grads[a.0], binary(g, tb, Bcast::Same, |gv, bv| gv / bv));
                let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                for (j, o) in gb.data_mut().iter_mut().enumerate() {
                    let bv = tb.data()[j];
                    *o = -g.data()[j] * ta.data()[j] / (bv * bv);
                }
                add_into(&mut grads[b.0], gb);
            }
            Op::Scale(a, s) => add_into(&mut grads[a.0], g.map(|v| v * s)),
            Op::AddScalar(a) => add_into(&mut grads[a.0], g.clone()),
            Op::Sigmoid(a) => {
                add_into(&mut grads[a.0], binary(g, y, Bcast::Same, |gv, yv| gv * yv * (1.0 - yv)))
            }
            Op::Tanh(a) => {
                add_into(&mut grads[a.0], binary(g, y, Bcast::Same, |gv, yv| gv * (1.0 - yv * yv)))
            }
            Op::Relu(a) => add_into(
                &mut grads[a.0],
                binary(g, val(*a), Bcast::Same, |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::Prelu(a, slope) => {
                let ta = val(*a);
                let s = val(*slope).item();
                add_into(
                    &mut grads[a.0],
                    binary(g, ta, Bcast::Same, |gv, x| if x > 0.0 { gv } else { s * gv }),
                );
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, x)| if *x > 0.0 { 0.0 } else { gv * x })
                    .sum();
                add_into(&mut grads[slope.0], Tensor::scalar(gs));
            }
            Op::Exp(a) => add_into(&mut grads[a.0], binary(g, y, Bcast::Same, |gv, yv| gv * yv)),
            Op::Log(a) => {
                add_into(&mut grads[a.0], binary(g, val(*a), Bcast::Same, |gv, x| gv / x))
            }
            Op::Softplus(a) => add_into(
                &mut grads[a.0],
                binary(g, val(*a), Bcast::Same, |gv, x| gv * sigmoid(x)),
            ),
            Op::Square(a) => {
                add_into(&mut grads[a.0], binary(g, val(*a), Bcast::Same, |gv, x| 2.0 * gv * x))
            }
            Op::Softmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::LogSumExp(a) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    let (lse, gr) = (y.get(r, 0), g.get(r, 0));
                    for (o, x) in ga.row_mut(r).iter_mut().zip(ta.row(r)) {
                        *o = gr * (x - lse).exp();
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = val(*p).shape();
                    let gp = slot_mut(&mut grads[p.0], (rows, cols));
                    for r in 0..rows {
                        for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + cols]) {
                            *o += v;
                        }
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let shape = val(*a).shape();
                let ga = slot_mut(&mut grads[a.0], shape);
                for r in 0..g.rows() {
                    for (o, v) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = val(*p).shape();
                    let gp = slot_mut(&mut grads[p.0], (rows, cols));
                    let src = &g.data()[off * cols..(off + rows) * cols];
                    for (o, v) in gp.data_mut().iter_mut().zip(src) {
                        *o += v;
                    }
                    off += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let shape = val(*a).shape();
                let cols = shape.1;
                let ga = slot_mut(&mut grads[a.0], shape);
                let dst = &mut ga.data_mut()[start * cols..(start + g.rows()) * cols];
                for (o, v) in dst.iter_mut().zip(g.data()) {
                    *o += v;
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let n = y.cols() as f64;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    let inv = inv_std[r];
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (gr[c] - sum_g / n - yr[c] * sum_gy / n);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Mask(a, m) => add_into(&mut grads[a.0], binary(g, m, Bcast::Same, |gv, mv| gv * mv)),
            Op::Zoneout { new, prev, keep } => {
                add_into(&mut grads[prev.0], binary(g, keep, Bcast::Same, |gv, k| gv * k));
                add_into(&mut grads[new.0], binary(g, keep, Bcast::Same, |gv, k| gv * (1.0 - k)));
            }
            Op::Conv1d { x, w, width } => {
                let (tx, tw) = (val(*x), val(*w));
                let cols = im2col(tx, *width);
                let (t, cout) = (tx.rows(), tw.cols());
                let kdim = cols.cols();
                let gw = slot_mut(&mut grads[w.0], tw.shape());
                gemm(kdim, t, cout, cols.data(), true, g.data(), false, gw.data_mut(), true);
                let mut gcols = Tensor::zeros(t, kdim);
                gemm(t, cout, kdim, g.data(), false, tw.data(), true, gcols.data_mut(), false);
                let gx = slot_mut(&mut grads[x.0], tx.shape());
                col2im(&gcols, *width, tx.cols(), gx);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                add_into(&mut grads[a.0], Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).fill(g.get(row, 0));
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).copy_from_slice(g.row(0));
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                add_into(&mut grads[a.0], Tensor::from_vec(r, c, g.data().to_vec()).expect("reshape"));
            }
            Op::ShiftRight(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[..c - 1].copy_from_slice(&g.row(row)[1..]);
                }
                add_into(&mut grads[a.0], ga);
            }
            Op::NormalizeRows { a, sums } => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - dot) / sums[r];
                    }
                }
                add_into(&mut grads[a.0], ga);
            }
        }
    }
}
