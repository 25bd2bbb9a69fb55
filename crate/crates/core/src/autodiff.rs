//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. All values are rank-2
//! matrices; vectors are `1 x n` rows.
//!
//! Nodes created with [`Graph::constant`] never receive gradients, and neither
//! does anything computed purely from constants.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Gelu(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    L2NormRows(Var, f64),
    LayerNormRows(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    VladAggregate(Var, Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` does not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    let (r, c) = t.dims2();
    if t.rank() == 2 {
        t
    } else {
        Tensor::matrix(r, c, t.into_data())
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    // ln σ(x) = -softplus(-x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn logsumexp_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Sum whose result does not depend on the order of `terms`.
fn order_free_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `y[k][d] = Σ_n w[n][k] · (f[n][d] - c[k][d])`, accumulated order-free over `n`.
pub(crate) fn vlad_aggregate(w: &Tensor, f: &Tensor, c: &Tensor) -> Tensor {
    let (n, k) = w.dims2();
    let d = f.cols();
    let mut out = vec![0.0; k * d];
    let mut terms = vec![0.0; n];
    for kk in 0..k {
        for dd in 0..d {
            let center = c.at(kk, dd);
            for (i, t) in terms.iter_mut().enumerate() {
                *t = w.at(i, kk) * (f.at(i, dd) - center);
            }
            out[kk * d + dd] = order_free_sum(&mut terms);
        }
    }
    Tensor::matrix(k, d, out)
}

pub(crate) fn l2_normalize_rows(x: &Tensor, eps: f64) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(eps);
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: as_matrix(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: as_matrix(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_row(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(Error::shape(format!(
                "row broadcast: {m}x{n} with {:?}",
                self.dims(row)
            )));
        }
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(&r) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let op = if mul {
            Op::MulRow(a, row)
        } else {
            Op::AddRow(a, row)
        };
        Ok(self.push(value, op, &[a, row]))
    }

    /// `a[m x n] + row[1 x n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row(a, row, false)
    }

    /// `a[m x n] * row[1 x n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row(a, row, true)
    }

    /// `a[m x n] * col[m x 1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(col) != (m, 1) {
            return Err(Error::shape(format!(
                "column broadcast: {m}x{n} with {:?}",
                self.dims(col)
            )));
        }
        let c = self.value(col).data().to_vec();
        let mut value = self.value(a).clone();
        for (chunk, &s) in value.data_mut().chunks_mut(n).zip(&c) {
            for x in chunk.iter_mut() {
                *x *= s;
            }
        }
        Ok(self.push(value, Op::MulCol(a, col), &[a, col]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// `ln σ(x)` without forming `σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(log_sigmoid_scalar);
        self.push(value, Op::LogSigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a), &[a])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi), &[a])
    }

    fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(src.row_slice(i), &mut out[i * c..(i + 1) * c]);
        }
        self.push(Tensor::matrix(r, c, out), Op::SoftmaxRows(a), &[a])
    }

    /// Softmax along `axis` (1: across each row, 0: down each column),
    /// stabilized by subtracting the maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.softmax_rows(a)),
            0 => {
                let t = self.transpose(a);
                let s = self.softmax_rows(t);
                Ok(self.transpose(s))
            }
            _ => Err(Error::shape(format!("softmax axis {axis} out of range"))),
        }
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut out = src.clone();
        for i in 0..r {
            let lse = logsumexp_row(src.row_slice(i));
            for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Row-wise log-sum-exp, `m x n -> m x 1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let (r, _) = self.dims(a);
        let src = self.value(a);
        let out: Vec<f64> = (0..r).map(|i| logsumexp_row(src.row_slice(i))).collect();
        self.push(Tensor::matrix(r, 1, out), Op::LogSumExpRows(a), &[a])
    }

    /// Divide each slice along `axis` by `max(||slice||_2, eps)`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("l2_normalize requires eps > 0"));
        }
        match axis {
            1 => {
                let value = l2_normalize_rows(self.value(a), eps);
                Ok(self.push(value, Op::L2NormRows(a, eps), &[a]))
            }
            0 => {
                let t = self.transpose(a);
                let n = self.l2_normalize(t, 1, eps)?;
                Ok(self.transpose(n))
            }
            _ => Err(Error::shape(format!("l2_normalize axis {axis} out of range"))),
        }
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps), &[a])
    }

    /// Sum of all entries, as a `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::matrix(1, 1, vec![s]), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(src.row_slice(i)) {
                *o += x;
            }
        }
        self.push(Tensor::matrix(1, c, out), Op::SumRows(a), &[a])
    }

    /// Column means, `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let r = self.dims(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / r)
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, _) = self.dims(a);
        let src = self.value(a);
        let out: Vec<f64> = (0..r).map(|i| src.row_slice(i).iter().sum()).collect();
        self.push(Tensor::matrix(r, 1, out), Op::SumCols(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, _) = self.dims(a);
        if start > end || end > r {
            return Err(Error::shape(format!("row slice {start}..{end} of {r} rows")));
        }
        let value = self.value(a).slice_rows(start, end);
        Ok(self.push(value, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, c) = self.dims(a);
        if start > end || end > c {
            return Err(Error::shape(format!("column slice {start}..{end} of {c} columns")));
        }
        let value = self.value(a).slice_cols(start, end);
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row-major reinterpretation with a new matrix shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshaped(vec![rows, cols])?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// VLAD residual aggregation: for weights `w[N x K]`, features `f[N x D]`
    /// and centers `c[K x D]`, returns `y[K x D]` with
    /// `y[k][d] = Σ_n w[n][k] (f[n][d] - c[k][d])`.
    ///
    /// Terms are summed in sorted order so that permuting the rows of `w`
    /// and `f` together gives a bit-identical result.
    pub fn vlad_aggregate(&mut self, w: Var, f: Var, c: Var) -> Result<Var> {
        let (n, k) = self.dims(w);
        let (n2, d) = self.dims(f);
        if n != n2 || self.dims(c) != (k, d) {
            return Err(Error::shape(format!(
                "vlad_aggregate: weights {n}x{k}, features {n2}x{d}, centers {:?}",
                self.dims(c)
            )));
        }
        let value = vlad_aggregate(self.value(w), self.value(f), self.value(c));
        Ok(self.push(value, Op::VladAggregate(w, f, c), &[w, f, c]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::matrix(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = g.matmul(&vb.transpose()).expect("matmul grad");
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = va.transpose().matmul(g).expect("matmul grad");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    let (r, c) = g.dims2();
                    let mut s = vec![0.0; c];
                    for i in 0..r {
                        for (o, &x) in s.iter_mut().zip(g.row_slice(i)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::matrix(1, c, s));
                }
            }
            Op::MulRow(a, row) => {
                let (r, c) = g.dims2();
                let rv = self.value(*row);
                let av = self.value(*a);
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for chunk in ga.data_mut().chunks_mut(c) {
                        for (x, &y) in chunk.iter_mut().zip(rv.data()) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*row) {
                    let mut s = vec![0.0; c];
                    for i in 0..r {
                        for (j, o) in s.iter_mut().enumerate() {
                            *o += g.at(i, j) * av.at(i, j);
                        }
                    }
                    self.accumulate(grads, *row, Tensor::matrix(1, c, s));
                }
            }
            Op::MulCol(a, col) => {
                let (r, c) = g.dims2();
                let cv = self.value(*col);
                let av = self.value(*a);
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for (chunk, &s) in ga.data_mut().chunks_mut(c).zip(cv.data()) {
                        for x in chunk.iter_mut() {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*col) {
                    let s: Vec<f64> = (0..r)
                        .map(|i| {
                            g.row_slice(i)
                                .iter()
                                .zip(av.row_slice(i))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.accumulate(grads, *col, Tensor::matrix(r, 1, s));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |x, s| x * s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                let ga = g.zip_map(self.value(*a), |x, z| x * sigmoid_scalar(-z));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, z| if z > 0.0 { x } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |x, z| x * gelu_grad_scalar(z));
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = g.zip_map(self.value(*a), |x, z| x / z);
                self.accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(self.value(*a), |x, z| {
                    if z >= *lo && z <= *hi {
                        x
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = g.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let s = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let dot: f64 = s.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = s[j] * (gi[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga));
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = g.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let ls = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let total: f64 = gi.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = gi[j] - ls[j].exp() * total;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga));
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let (r, c) = av.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let lse = out.at(i, 0);
                    let gi = g.at(i, 0);
                    for j in 0..c {
                        ga[i * c + j] = gi * (av.at(i, j) - lse).exp();
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga));
            }
            Op::L2NormRows(a, eps) => {
                let av = self.value(*a);
                let (r, c) = av.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let x = av.row_slice(i);
                    let y = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > *eps {
                        let dot: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] = (gi[j] - y[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..c {
                            ga[i * c + j] = gi[j] / eps;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga));
            }
            Op::LayerNormRows(a, eps) => {
                let av = self.value(*a);
                let (r, c) = av.dims2();
                let n = c as f64;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let x = av.row_slice(i);
                    let y = out.row_slice(i);
                    let gi = g.row_slice(i);
                    let mean = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gi.iter().sum::<f64>() / n;
                    let gy_mean = gi.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        ga[i * c + j] = inv * (gi[j] - g_mean - y[j] * gy_mean);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga));
            }
            Op::SumAll(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.dims(*a);
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend_from_slice(g.data());
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga));
            }
            Op::SumCols(a) => {
                let (r, c) = self.dims(*a);
                let mut ga = Vec::with_capacity(r * c);
                for i in 0..r {
                    ga.extend(std::iter::repeat_n(g.at(i, 0), c));
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga));
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.dims(*a);
                let mut ga = Tensor::zeros(r, c);
                let n = g.numel();
                ga.data_mut()[start * c..start * c + n].copy_from_slice(g.data());
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let w = g.cols();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, offset + w));
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(grads, *a, Tensor::matrix(r, c, g.data().to_vec()));
            }
            Op::VladAggregate(w, f, c) => {
                let (wv, fv, cv) = (self.value(*w), self.value(*f), self.value(*c));
                let (n, k) = wv.dims2();
                let d = fv.cols();
                if self.needs(*w) {
                    let mut gw = vec![0.0; n * k];
                    for i in 0..n {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for dd in 0..d {
                                s += g.at(kk, dd) * (fv.at(i, dd) - cv.at(kk, dd));
                            }
                            gw[i * k + kk] = s;
                        }
                    }
                    self.accumulate(grads, *w, Tensor::matrix(n, k, gw));
                }
                if self.needs(*f) {
                    // d/df = w · g
                    let gf = wv.matmul(g).expect("vlad grad");
                    self.accumulate(grads, *f, gf);
                }
                if self.needs(*c) {
                    let mut mass = vec![0.0; k];
                    for i in 0..n {
                        for (m, &x) in mass.iter_mut().zip(wv.row_slice(i)) {
                            *m += x;
                        }
                    }
                    let mut gc = vec![0.0; k * d];
                    for kk in 0..k {
                        for dd in 0..d {
                            gc[kk * d + dd] = -g.at(kk, dd) * mass[kk];
                        }
                    }
                    self.accumulate(grads, *c, Tensor::matrix(k, d, gc));
                }
            }
        }
    }
}

/// Maximum relative error between analytic and central-difference gradients
/// of the scalar built by `f` from `params`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-3)`; the floor
/// keeps near-zero gradients from amplifying finite-difference noise.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p);
        for e in 0..p.numel() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random(r: usize, c: usize, rng: &mut SeededRng) -> Tensor {
        Tensor::uniform(r, c, 1.0, rng)
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 0.0]));
        let s = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::row(vec![0.0, 3f64.ln()]));
        let s = g.softmax(x, 1).unwrap();
        assert!((g.value(s).at(0, 0) - 0.25).abs() < 1e-15);
        assert!((g.value(s).at(0, 1) - 0.75).abs() < 1e-15);

        let x = g.constant(Tensor::row(vec![1000.0, 0.0]));
        let s = g.softmax(x, 1).unwrap();
        assert!((g.value(s).at(0, 0) - 1.0).abs() < 1e-12);
        assert!(g.value(s).at(0, 1).abs() < 1e-12);
    }

    #[test]
    fn softmax_columns() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]));
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 100.0, -1.0, 1.0]));
        let s = g.sigmoid(x);
        let v = g.value(s).data().to_vec();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] - (1.0 - v[3])).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        for (input, want) in [
            (vec![3.0, 4.0], vec![0.6, 0.8]),
            (vec![0.0, 0.0], vec![0.0, 0.0]),
            (vec![-3.0, 4.0], vec![-0.6, 0.8]),
        ] {
            let x = g.constant(Tensor::row(input));
            let n = g.l2_normalize(x, 1, 1e-6).unwrap();
            for (a, b) in g.value(n).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let x = g.constant(Tensor::row(vec![1.0]));
        assert!(g.l2_normalize(x, 1, 0.0).is_err());
    }

    #[test]
    fn concat_and_relu() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![-1.0, 2.0]));
        let b = g.constant(Tensor::row(vec![3.0]));
        let c = g.concat_cols(&[a, b]).unwrap();
        let r = g.relu(c);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_gives_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(3.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(x, g.value(x)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut rng = SeededRng::new(5);
        let mut g = Graph::new();
        let x = g.param(random(3, 4, &mut rng));
        let w = g.param(random(4, 2, &mut rng));
        let h = g.matmul(x, w).unwrap();
        let s = g.softmax(h, 1).unwrap();
        let loss = g.sum(s);
        let a = g.backward(loss).unwrap();
        let b = g.backward(loss).unwrap();
        assert_eq!(a.get(x).unwrap(), b.get(x).unwrap());
        assert_eq!(a.get(w).unwrap(), b.get(w).unwrap());
    }

    #[test]
    fn grad_check_quadratic() {
        let p = Tensor::row(vec![0.3, -1.2, 2.0]);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[p],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let mut rng = SeededRng::new(11);
        let logits = random(2, 5, &mut rng);
        let target = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.2, 0.2, 0.2, 0.2, 0.2],
        ]);
        let err = grad_check(
            |g, v| {
                let ls = g.log_softmax(v[0]);
                let t = g.constant(target.clone());
                let m = g.mul(ls, t)?;
                let s = g.sum(m);
                Ok(g.scale(s, -1.0))
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Every op's analytic gradient against central differences.
    #[test]
    fn grad_check_every_op() {
        let mut rng = SeededRng::new(23);
        let a = random(3, 4, &mut rng);
        let b = random(4, 2, &mut rng);
        let row = random(1, 4, &mut rng);
        let col = random(3, 1, &mut rng);
        let c = random(3, 4, &mut rng);
        let probe = random(3, 4, &mut rng);
        type Case = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
        let cases: Vec<(&str, Case)> = vec![
            ("matmul", Box::new(|g, v| g.matmul(v[0], v[1]))),
            ("transpose", Box::new(|g, v| Ok(g.transpose(v[0])))),
            ("add", Box::new(|g, v| g.add(v[0], v[4]))),
            ("sub", Box::new(|g, v| g.sub(v[0], v[4]))),
            ("mul", Box::new(|g, v| g.mul(v[0], v[4]))),
            ("add_row", Box::new(|g, v| g.add_row(v[0], v[2]))),
            ("mul_row", Box::new(|g, v| g.mul_row(v[0], v[2]))),
            ("mul_col", Box::new(|g, v| g.mul_col(v[0], v[3]))),
            ("scale", Box::new(|g, v| Ok(g.scale(v[0], -2.5)))),
            ("add_scalar", Box::new(|g, v| Ok(g.add_scalar(v[0], 0.7)))),
            ("sigmoid", Box::new(|g, v| Ok(g.sigmoid(v[0])))),
            ("log_sigmoid", Box::new(|g, v| Ok(g.log_sigmoid(v[0])))),
            ("relu", Box::new(|g, v| Ok(g.relu(v[0])))),
            ("gelu", Box::new(|g, v| Ok(g.gelu(v[0])))),
            ("ln", Box::new(|g, v| {
                let s = g.sigmoid(v[0]);
                Ok(g.ln(s))
            })),
            ("clamp", Box::new(|g, v| Ok(g.clamp(v[0], -0.5, 0.5)))),
            ("softmax_rows", Box::new(|g, v| g.softmax(v[0], 1))),
            ("softmax_cols", Box::new(|g, v| g.softmax(v[0], 0))),
            ("log_softmax", Box::new(|g, v| Ok(g.log_softmax(v[0])))),
            ("logsumexp", Box::new(|g, v| Ok(g.logsumexp(v[0])))),
            ("l2_rows", Box::new(|g, v| g.l2_normalize(v[0], 1, 1e-6))),
            ("l2_cols", Box::new(|g, v| g.l2_normalize(v[0], 0, 1e-6))),
            ("layer_norm", Box::new(|g, v| Ok(g.layer_norm(v[0], 1e-6)))),
            ("sum_rows", Box::new(|g, v| Ok(g.sum_rows(v[0])))),
            ("sum_cols", Box::new(|g, v| Ok(g.sum_cols(v[0])))),
            ("mean", Box::new(|g, v| Ok(g.mean(v[0])))),
            ("slice_rows", Box::new(|g, v| g.slice_rows(v[0], 1, 3))),
            ("slice_cols", Box::new(|g, v| g.slice_cols(v[0], 1, 3))),
            ("concat", Box::new(|g, v| g.concat_cols(&[v[0], v[3], v[4]]))),
            ("reshape", Box::new(|g, v| g.reshape(v[0], 2, 6))),
            ("vlad", Box::new(|g, v| {
                // weights 3x2 from a softmax, features 3x4, centers 2x4
                let w = g.matmul(v[0], v[1])?;
                let w = g.softmax(w, 1)?;
                let cen = g.slice_rows(v[4], 0, 2)?;
                g.vlad_aggregate(w, v[0], cen)
            })),
        ];
        for (name, op) in cases {
            let probe = probe.clone();
            let err = grad_check(
                |g, v| {
                    let out = op(g, v)?;
                    // contract the output against a fixed random tensor
                    let (r, c) = g.dims(out);
                    let p = g.constant(Tensor::matrix(
                        r,
                        c,
                        probe.data().iter().cycle().take(r * c).copied().collect(),
                    ));
                    let m = g.mul(out, p)?;
                    Ok(g.sum(m))
                },
                &[a.clone(), b.clone(), row.clone(), col.clone(), c.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{name}: relative error {err}");
        }
    }

    #[test]
    fn vlad_aggregate_is_order_free() {
        let mut rng = SeededRng::new(2);
        let w = random(7, 3, &mut rng);
        let f = random(7, 5, &mut rng);
        let c = random(3, 5, &mut rng);
        let y = vlad_aggregate(&w, &f, &c);
        let perm = [4, 0, 6, 2, 1, 5, 3];
        let y2 = vlad_aggregate(&w.gather_rows(&perm), &f.gather_rows(&perm), &c);
        assert_eq!(y, y2);
    }

    #[test]
    fn truncate_reuses_prefix() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(vec![2.0]));
        let mark = g.len();
        for x in [1.0, 3.0] {
            let xi = g.constant(Tensor::row(vec![x]));
            let y = g.mul(w, xi).unwrap();
            let loss = g.sum(y);
            let grads = g.backward(loss).unwrap();
            assert_eq!(grads.get(w).unwrap().item(), x);
            g.truncate(mark);
        }
        assert_eq!(g.len(), 1);
    }
}
