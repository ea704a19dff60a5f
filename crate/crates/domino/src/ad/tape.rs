//! Reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation evaluates its
//! forward value eagerly and records its parents, which always precede it, so
//! the node order is already a topological order and [`Tape::backward`] is a
//! single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, sigmoid, Layout, Tensor};
use crate::error::{dim_err, Error, Result};

/// Number of zero-norm rows seen by [`Tape::normalize_rows`] and
/// [`crate::context::critic`].
static DEGENERATE_NORMALIZATIONS: AtomicU64 = AtomicU64::new(0);

pub fn degenerate_normalizations() -> u64 {
    DEGENERATE_NORMALIZATIONS.load(Ordering::Relaxed)
}

pub(crate) fn note_degenerate_normalization() {
    DEGENERATE_NORMALIZATIONS.fetch_add(1, Ordering::Relaxed);
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Swish(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    RowDot(Var, Var),
    NormalizeRows(Var),
    LogSumExpRows(Var),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    MeanPoolRows(Var, usize),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return dim_err(format!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Parameters and constants are both leaves; whether a
    /// gradient is used is up to the caller.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims();
        let (k2, n) = self.value(b).dims();
        if k != k2 {
            return dim_err(format!("matmul {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Normal, 0.0, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), t))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims();
        let (n, k2) = self.value(b).dims();
        if k != k2 {
            return dim_err(format!("matmul_bt {m}x{k} by ({n}x{k2})^T"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), Layout::Normal, self.value(b).data(), Layout::Transposed, 0.0, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMulBt(a, b), t))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if self.value(bias).dims() != (1, c) {
            return dim_err(format!("bias {:?} for {r}x{c}", self.value(bias).dims()));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(Op::AddBias(a, bias), t))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same(self.value(a), self.value(b), what)?;
        let (r, c) = self.value(a).dims();
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    /// Multiplies every row of `a` elementwise by the `1 x c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (rows, c) = self.value(a).dims();
        if self.value(r).dims() != (1, c) {
            return dim_err(format!("mul_row {:?} for {rows}x{c}", self.value(r).dims()));
        }
        let rv = self.value(r).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, s) in row.iter_mut().zip(rv) {
                *o *= s;
            }
        }
        let t = Tensor::matrix(rows, c, out)?;
        Ok(self.push(Op::MulRow(a, r), t))
    }

    /// Elementwise product with a constant of the same shape (masks).
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var> {
        check_same(self.value(a), &k, "mul_const")?;
        let (r, c) = self.value(a).dims();
        let data = self.value(a).data().iter().zip(k.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::matrix(r, c, data)?;
        Ok(self.push(Op::MulConst(a, k), t))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let (r, c) = self.value(a).dims();
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::matrix(r, c, data).expect("shape preserved")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x * s);
        self.push(Op::Scale(a, s), t)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x + s);
        self.push(Op::AddScalar(a), t)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * sigmoid(x));
        self.push(Op::Swish(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        self.push(Op::Tanh(a), t)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        self.push(Op::Exp(a), t)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::ln);
        self.push(Op::Log(a), t)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x * x);
        self.push(Op::Square(a), t)
    }

    /// Hard clamp; the gradient is passed only where the input lies in `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(a, |x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims();
        let data = self.value(a).data().chunks(c).map(|row| row.iter().sum()).collect();
        let t = Tensor::matrix(r, 1, data).expect("r x 1");
        self.push(Op::SumCols(a), t)
    }

    /// Per-row dot products as an `r x 1` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "row_dot")?;
        let (r, c) = self.value(a).dims();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .zip(self.value(b).data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let t = Tensor::matrix(r, 1, data)?;
        Ok(self.push(Op::RowDot(a, b), t))
    }

    /// Scales every row to unit Euclidean norm. Zero rows map to zero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            } else {
                note_degenerate_normalization();
            }
        }
        let t = Tensor::matrix(r, c, out).expect("shape preserved");
        self.push(Op::NormalizeRows(a), t)
    }

    /// Row-wise log-sum-exp as an `r x 1` column, max-shifted.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims();
        let data = self.value(a).data().chunks(c).map(super::tensor::logsumexp).collect();
        let t = Tensor::matrix(r, 1, data).expect("r x 1");
        self.push(Op::LogSumExpRows(a), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        let rows = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return dim_err("concat_cols row counts differ");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t))
    }

    /// `out[i] = a.data[index[i]]`, viewed as `rows x cols`.
    ///
    /// Covers slicing, row repetition, reshapes and arbitrary picks.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        if index.len() != rows * cols {
            return dim_err(format!("gather of {} indices into {rows}x{cols}", index.len()));
        }
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return dim_err(format!("gather index {bad} out of range {}", src.len()));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::Gather(a, index), t))
    }

    /// Repeats each row of `a` `times` times in place (`r x c` -> `r*times x c`).
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        let index = (0..r).flat_map(|row| (0..times).flat_map(move |_| (0..c).map(move |j| row * c + j))).collect();
        self.gather(a, index, r * times, c)
    }

    /// Columns `start..start+len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if start + len > c || len == 0 {
            return dim_err(format!("slice {start}..{} of {c} columns", start + len));
        }
        let index = (0..r).flat_map(|row| (start..start + len).map(move |j| row * c + j)).collect();
        self.gather(a, index, r, len)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let n = self.value(a).len();
        self.gather(a, (0..n).collect(), rows, cols)
    }

    /// Averages consecutive groups of `group` rows.
    pub fn mean_pool_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if group == 0 || r % group != 0 {
            return dim_err(format!("cannot pool {r} rows in groups of {group}"));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; (r / group) * c];
        for (i, row) in src.chunks(c).enumerate() {
            let o = &mut out[(i / group) * c..(i / group + 1) * c];
            for (x, y) in o.iter_mut().zip(row) {
                *x += y / group as f64;
            }
        }
        let t = Tensor::matrix(r / group, c, out)?;
        Ok(self.push(Op::MeanPoolRows(a, group), t))
    }

    /// Reverse sweep from a scalar node.
    ///
    /// Every leaf receives a gradient; leaves the loss does not depend on get
    /// zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                match &grads[i] {
                    Some(g) => g.ensure_finite("gradient")?,
                    None => grads[i] = Some(node.value.zeros_like()),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims();
                let n = out.cols();
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, Layout::Normal, self.value(*b).data(), Layout::Transposed, 0.0, &mut da);
                accumulate(grads, *a, self.value(*a), &da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, self.value(*a).data(), Layout::Transposed, gd, Layout::Normal, 0.0, &mut db);
                accumulate(grads, *b, self.value(*b), &db);
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).dims();
                let n = out.cols();
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, Layout::Normal, self.value(*b).data(), Layout::Normal, 0.0, &mut da);
                accumulate(grads, *a, self.value(*a), &da);
                let mut db = vec![0.0; n * k];
                gemm(n, m, k, gd, Layout::Transposed, self.value(*a).data(), Layout::Normal, 0.0, &mut db);
                accumulate(grads, *b, self.value(*b), &db);
            }
            Op::AddBias(a, bias) => {
                accumulate(grads, *a, self.value(*a), gd);
                let c = out.cols();
                let mut db = vec![0.0; c];
                for row in gd.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                }
                accumulate(grads, *bias, self.value(*bias), &db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, self.value(*a), gd);
                accumulate(grads, *b, self.value(*b), gd);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, self.value(*a), gd);
                let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                accumulate(grads, *b, self.value(*b), &neg);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da: Vec<f64> = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, self.value(*a), &da);
                accumulate(grads, *b, self.value(*b), &db);
            }
            Op::MulRow(a, r) => {
                let c = out.cols();
                let rv = self.value(*r).data();
                let av = self.value(*a).data();
                let mut da = vec![0.0; gd.len()];
                let mut dr = vec![0.0; c];
                for (i, (gg, xx)) in gd.chunks(c).zip(av.chunks(c)).enumerate() {
                    for j in 0..c {
                        da[i * c + j] = gg[j] * rv[j];
                        dr[j] += gg[j] * xx[j];
                    }
                }
                accumulate(grads, *a, self.value(*a), &da);
                accumulate(grads, *r, self.value(*r), &dr);
            }
            Op::MulConst(a, k) => {
                let da: Vec<f64> = gd.iter().zip(k.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = gd.iter().map(|g| g * s).collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::AddScalar(a) => accumulate(grads, *a, self.value(*a), gd),
            Op::Swish(a) => {
                let xv = self.value(*a).data();
                let da: Vec<f64> = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::Tanh(a) => {
                let da: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::Exp(a) => {
                let da: Vec<f64> = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::Log(a) => {
                let da: Vec<f64> = gd.iter().zip(self.value(*a).data()).map(|(g, x)| g / x).collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::Square(a) => {
                let da: Vec<f64> = gd.iter().zip(self.value(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::Clamp(a, lo, hi) => {
                let da: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::Sum(a) => {
                let da = vec![gd[0]; self.value(*a).len()];
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![gd[0] / n as f64; n];
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::SumCols(a) => {
                let c = self.value(*a).cols();
                let da: Vec<f64> = gd.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect();
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::RowDot(a, b) => {
                let c = self.value(*a).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for (r, &g) in gd.iter().enumerate() {
                    for j in r * c..(r + 1) * c {
                        da[j] = g * bv[j];
                        db[j] = g * av[j];
                    }
                }
                accumulate(grads, *a, self.value(*a), &da);
                accumulate(grads, *b, self.value(*b), &db);
            }
            Op::NormalizeRows(a) => {
                let c = out.cols();
                let av = self.value(*a).data();
                let mut da = vec![0.0; av.len()];
                for (r, ((gg, yy), xx)) in gd.chunks(c).zip(out.data().chunks(c)).zip(av.chunks(c)).enumerate() {
                    let norm = xx.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let proj: f64 = gg.iter().zip(yy).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        da[r * c + j] = (gg[j] - yy[j] * proj) / norm;
                    }
                }
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::LogSumExpRows(a) => {
                let c = self.value(*a).cols();
                let av = self.value(*a).data();
                let mut da = vec![0.0; av.len()];
                for (r, (&g, &lse)) in gd.iter().zip(out.data()).enumerate() {
                    for j in r * c..(r + 1) * c {
                        da[j] = g * (av[j] - lse).exp();
                    }
                }
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + c]);
                    }
                    accumulate(grads, p, self.value(p), &dp);
                    offset += c;
                }
            }
            Op::Gather(a, index) => {
                let mut da = vec![0.0; self.value(*a).len()];
                for (&i, &g) in index.iter().zip(gd) {
                    da[i] += g;
                }
                accumulate(grads, *a, self.value(*a), &da);
            }
            Op::MeanPoolRows(a, group) => {
                let c = out.cols();
                let n = self.value(*a).rows();
                let mut da = vec![0.0; n * c];
                for r in 0..n {
                    let src = &gd[(r / group) * c..(r / group + 1) * c];
                    for j in 0..c {
                        da[r * c + j] = src[j] / *group as f64;
                    }
                }
                accumulate(grads, *a, self.value(*a), &da);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.data_mut().iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => {
            *slot = Some(Tensor::new(like.shape().to_vec(), delta.to_vec()).expect("gradient matches value shape"));
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`. Always present for leaves.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
