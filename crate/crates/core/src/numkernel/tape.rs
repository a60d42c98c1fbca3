//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and a record of
//! its inputs. Node ids only ever point backwards, so the append order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::ops::Range;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, bt: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    AddRow { a: usize, row: usize },
    MulRow { a: usize, row: usize },
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    RowSum(usize),
    Softmax(usize),
    LayerNorm { a: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { a: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Gelu(usize),
    Relu(usize),
    Sigmoid { a: usize, lo: f64, hi: f64 },
    Log(usize),
    Exp(usize),
    Abs(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Slice { a: usize, rows: Range<usize>, cols: Range<usize> },
    Reshape(usize),
    GatherRows { a: usize, idx: Vec<Option<usize>> },
    Focal { pred: usize, target: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Min(..) => "min",
            Op::Max(..) => "max",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::Softmax(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Abs(..) => "abs",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::Focal { .. } => "focal_loss",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The compute tape. One tape records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn slot(adj: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    adj[i].get_or_insert_with(|| vec![0.0; len])
}

// 0.5 (1 + tanh(u)) = sigmoid(2u); exp is much cheaper than tanh.
fn gelu(x: f64) -> f64 {
    x / (1.0 + (-2.0 * GELU_C * (x + GELU_K * x * x * x)).exp())
}

fn gelu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_K * x * x * x)).exp());
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn affine_rows(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(g.len()) {
        out.extend(row.iter().zip(g).zip(b).map(|((x, g), b)| x * g + b));
    }
    out
}

/// `acc[j] += f(g[i, j], x[i, j])` summed over rows.
fn accumulate_rows(acc: &mut [f64], g: &[f64], f: impl Fn(f64, f64) -> f64, x: &[f64]) {
    let n = acc.len();
    for (g, x) in g.chunks_exact(n).zip(x.chunks_exact(n)) {
        acc.iter_mut().zip(g).zip(x).for_each(|((a, &g), &x)| *a += f(g, x));
    }
}

/// Row-wise normalisation shared by layer and batch norm. Returns (xhat, rstd, mean, var)
/// for an `[m, n]` view normalised along `n`.
fn normalize_rows(x: &[f64], m: usize, n: usize, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; m * n];
    let mut rstd = vec![0.0; m];
    let mut means = vec![0.0; m];
    let mut vars = vec![0.0; m];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            xhat[i * n + j] = (row[j] - mean) * r;
        }
        rstd[i] = r;
        means[i] = mean;
        vars[i] = var;
    }
    (xhat, rstd, means, vars)
}

/// Backward of `xhat = (x - mean) * rstd` along rows, given `dxhat`.
fn normalize_rows_backward(dxhat: &[f64], xhat: &[f64], rstd: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; m * n];
    for i in 0..m {
        let d = &dxhat[i * n..(i + 1) * n];
        let xh = &xhat[i * n..(i + 1) * n];
        let mean_d = d.iter().sum::<f64>() / n as f64;
        let mean_dx = d.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for j in 0..n {
            dx[i * n + j] = rstd[i] * (d[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

impl Tape {
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Batch mean and biased variance recorded by a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.val(v);
        if t.shape().len() != 2 {
            return Err(Error::shape(op, t.shape(), &[0, 0]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.val(a).shape(), self.val(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, &mut out, 0.0);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a: a.0, b: b.0, bt: false }, &[a.0, b.0])
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.val(a).shape(), self.val(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), true, &mut out, 0.0);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a: a.0, b: b.0, bt: true }, &[a.0, b.0])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        check_same(op.name(), self.val(a), self.val(b))?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.val(a).shape(), data)?;
        self.push(out, op, &[a.0, b.0])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.val(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())?;
        self.push(out, op, &[a.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Min(a.0, b.0), f64::min)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Max(a.0, b.0), f64::max)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tr) = (self.val(a), self.val(row));
        let n = ta.cols();
        if tr.len() != n {
            return Err(Error::shape(op.name(), ta.shape(), tr.shape()));
        }
        let r = tr.data();
        let mut data = Vec::with_capacity(ta.len());
        for chunk in ta.data().chunks_exact(n.max(1)) {
            data.extend(chunk.iter().zip(r).map(|(&x, &r)| f(x, r)));
        }
        let out = Tensor::new(ta.shape(), data)?;
        self.push(out, op, &[a.0, row.0])
    }

    /// `a + row` with `row` of length `cols(a)` broadcast over every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::AddRow { a: a.0, row: row.0 }, |x, r| x + r)
    }

    /// `a * row` with `row` broadcast over every row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, Op::MulRow { a: a.0, row: row.0 }, |x, r| x * r)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a.0), |x| x + c)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.val(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums of an `[m, n]` view, shaped `[m, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let (m, n) = (t.rows(), t.cols());
        let data = (0..m).map(|i| t.data()[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Tensor::new(&[m, 1], data)?, Op::RowSum(a.0), &[a.0])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| if x > m { x } else { m });
            let dst = &mut out[i * n..(i + 1) * n];
            dst.iter_mut().zip(row).for_each(|(d, &x)| *d = (x - mx).exp());
            let z: f64 = dst.iter().sum();
            let inv = 1.0 / z;
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::new(t.shape(), out)?;
        self.push(out, Op::Softmax(a.0), &[a.0])
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Domain("layer_norm eps must be positive".into()));
        }
        let t = self.val(a);
        let (m, n) = (t.rows(), t.cols());
        if self.val(gain).len() != n || self.val(bias).len() != n {
            return Err(Error::shape("layer_norm", t.shape(), self.val(gain).shape()));
        }
        let (xhat, rstd, _, _) = normalize_rows(t.data(), m, n, eps);
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let data = affine_rows(&xhat, g, b);
        let out = Tensor::new(t.shape(), data)?;
        self.push(
            out,
            Op::LayerNorm { a: a.0, gain: gain.0, bias: bias.0, xhat, rstd },
            &[a.0, gain.0, bias.0],
        )
    }

    /// Training-mode batch norm: each column is normalised with the statistics of
    /// its own entries across all rows (batch × spatial positions).
    pub fn batch_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.val(a);
        let (m, n) = (t.rows(), t.cols());
        if self.val(gain).len() != n || self.val(bias).len() != n {
            return Err(Error::shape("batch_norm", t.shape(), self.val(gain).shape()));
        }
        let tr = t.transpose();
        let (xhat_t, rstd, mean, var) = normalize_rows(tr.data(), n, m, eps);
        let xhat = Tensor::new(&[n, m], xhat_t)?.transpose().into_data();
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let data = affine_rows(&xhat, g, b);
        let out = Tensor::new(t.shape(), data)?;
        self.push(
            out,
            Op::BatchNorm { a: a.0, gain: gain.0, bias: bias.0, xhat, rstd, mean, var },
            &[a.0, gain.0, bias.0],
        )
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x³)))`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Gelu(a.0), gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.sigmoid_clamped(a, 0.0, 1.0)
    }

    /// Logistic squashing clamped to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn sigmoid_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(a, Op::Sigmoid { a: a.0, lo, hi }, |x| (1.0 / (1.0 + (-x).exp())).clamp(lo, hi))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a.0), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a.0), f64::exp)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a.0), f64::abs)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let n = self.val(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.val(*p);
            if t.cols() != n {
                return Err(Error::shape("concat_rows", self.val(*first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(&[rows, n], data)?, Op::ConcatRows(idx.clone()), &idx)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let m = self.val(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.val(*p);
            if t.rows() != m {
                return Err(Error::shape("concat_cols", self.val(*first).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for p in parts {
            let t = self.val(*p);
            let n = t.cols();
            for i in 0..m {
                data[i * total + off..i * total + off + n].copy_from_slice(t.row(i));
            }
            off += n;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(&[m, total], data)?, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let n = self.val(a).cols();
        self.slice(a, rows, 0..n)
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let m = self.val(a).rows();
        self.slice(a, 0..m, cols)
    }

    /// Copy of the `rows × cols` block of a matrix view.
    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let t = self.val(a);
        let (m, n) = (t.rows(), t.cols());
        if rows.start >= rows.end || rows.end > m {
            return Err(Error::Range { op: "slice", start: rows.start, end: rows.end, len: m });
        }
        if cols.start >= cols.end || cols.end > n {
            return Err(Error::Range { op: "slice", start: cols.start, end: cols.end, len: n });
        }
        let w = cols.len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for i in rows.clone() {
            data.extend_from_slice(&t.data()[i * n + cols.start..i * n + cols.end]);
        }
        let out = Tensor::new(&[rows.len(), w], data)?;
        self.push(out, Op::Slice { a: a.0, rows, cols }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a.0), &[a.0])
    }

    /// Row gather with zero padding: output row `r` is the concatenation over
    /// `t < taps` of `a.row(idx[r * taps + t])`, or zeros where the index is `None`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<Option<usize>>, taps: usize) -> Result<Var> {
        let t = self.val(a);
        let (m, n) = (t.rows(), t.cols());
        if taps == 0 || !idx.len().is_multiple_of(taps) || idx.is_empty() {
            return Err(Error::Contract(format!("gather_rows: {} indices, {} taps", idx.len(), taps)));
        }
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= m) {
            return Err(Error::Range { op: "gather_rows", start: *bad, end: bad + 1, len: m });
        }
        let out_rows = idx.len() / taps;
        let mut data = vec![0.0; idx.len() * n];
        for (k, src) in idx.iter().enumerate() {
            if let Some(s) = src {
                data[k * n..(k + 1) * n].copy_from_slice(t.row(*s));
            }
        }
        let out = Tensor::new(&[out_rows, taps * n], data)?;
        self.push(out, Op::GatherRows { a: a.0, idx }, &[a.0])
    }

    /// Penalty-reduced focal loss per row.
    ///
    /// `pred` and `target` are `[B, K]`; cells with target exactly 1 are peaks.
    /// Each row yields `-(1/P) Σ [ (1-p)^2 log p  at peaks ; (1-t)^4 p^2 log(1-p) elsewhere ]`
    /// with `P = max(#peaks, 1)`. The result is `[B, 1]`.
    pub fn focal_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        check_same("focal_loss", self.val(pred), self.val(target))?;
        let (p, t) = (self.val(pred), self.val(target));
        if p.data().iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(Error::Domain("focal_loss prediction outside (0, 1)".into()));
        }
        let (b, k) = (p.rows(), p.cols());
        let mut out = vec![0.0; b];
        for r in 0..b {
            let mut loss = 0.0;
            let mut peaks = 0usize;
            for c in 0..k {
                let (pv, tv) = (p.data()[r * k + c], t.data()[r * k + c]);
                if tv == 1.0 {
                    peaks += 1;
                    loss -= (1.0 - pv).powi(2) * pv.ln();
                } else {
                    loss -= (1.0 - tv).powi(4) * pv * pv * (1.0 - pv).ln();
                }
            }
            out[r] = loss / peaks.max(1) as f64;
        }
        self.push(Tensor::new(&[b, 1], out)?, Op::Focal { pred: pred.0, target: target.0 }, &[pred.0, target.0])
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let rg = |j: usize| nodes[j].requires_grad;
        let len = |j: usize| nodes[j].value.len();
        let v = |j: usize| nodes[j].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, bt } => {
                let (m, k) = (nodes[a].value.rows(), nodes[a].value.cols());
                let n = out.cols();
                if rg(a) {
                    let da = slot(adj, a, m * k);
                    // C = A·B  → dA = dC·Bᵀ ; C = A·Bᵀ → dA = dC·B
                    gemm(m, n, k, g, false, v(b), !bt, da, 1.0);
                }
                if rg(b) {
                    let db = slot(adj, b, k * n);
                    if bt {
                        // B is [n, k]: dB = dCᵀ·A
                        gemm(n, m, k, g, true, v(a), false, db, 1.0);
                    } else {
                        gemm(k, m, n, v(a), true, g, false, db, 1.0);
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(a) {
                    slot(adj, a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if rg(b) {
                    slot(adj, b, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    let vb = v(b);
                    slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| *d += g[k] * vb[k]);
                }
                if rg(b) {
                    let va = v(a);
                    slot(adj, b, g.len()).iter_mut().enumerate().for_each(|(k, d)| *d += g[k] * va[k]);
                }
            }
            &Op::Div(a, b) => {
                let (va, vb) = (v(a), v(b));
                if rg(a) {
                    slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| *d += g[k] / vb[k]);
                }
                if rg(b) {
                    slot(adj, b, g.len())
                        .iter_mut()
                        .enumerate()
                        .for_each(|(k, d)| *d -= g[k] * va[k] / (vb[k] * vb[k]));
                }
            }
            &Op::Min(a, b) | &Op::Max(a, b) => {
                let is_min = matches!(nodes[i].op, Op::Min(..));
                let (va, vb) = (v(a), v(b));
                let pick_a = |k: usize| if is_min { va[k] <= vb[k] } else { va[k] >= vb[k] };
                if rg(a) {
                    slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| {
                        if pick_a(k) {
                            *d += g[k]
                        }
                    });
                }
                if rg(b) {
                    slot(adj, b, g.len()).iter_mut().enumerate().for_each(|(k, d)| {
                        if !pick_a(k) {
                            *d += g[k]
                        }
                    });
                }
            }
            &Op::AddRow { a, row } => {
                let n = len(row);
                if rg(a) {
                    slot(adj, a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if rg(row) {
                    let dr = slot(adj, row, n);
                    accumulate_rows(dr, g, |g, _| g, g);
                }
            }
            &Op::MulRow { a, row } => {
                let n = len(row);
                let (va, vr) = (v(a), v(row));
                if rg(a) {
                    for (d, g) in slot(adj, a, g.len()).chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        d.iter_mut().zip(g).zip(vr).for_each(|((d, g), r)| *d += g * r);
                    }
                }
                if rg(row) {
                    let dr = slot(adj, row, n);
                    accumulate_rows(dr, g, |g, x| g * x, va);
                }
            }
            &Op::Scale(a, c) => {
                slot(adj, a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                slot(adj, a, g.len()).iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            &Op::Sum(a) => {
                slot(adj, a, len(a)).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::RowSum(a) => {
                let n = nodes[a].value.cols();
                slot(adj, a, len(a)).iter_mut().enumerate().for_each(|(k, d)| *d += g[k / n]);
            }
            &Op::Softmax(a) => {
                let y = out.data();
                let (m, n) = (out.rows(), out.cols());
                let da = slot(adj, a, m * n);
                for r in 0..m {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..n {
                        da[r * n + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, xhat, rstd } => {
                let (m, n) = (out.rows(), out.cols());
                let gv = v(*gain);
                if rg(*gain) {
                    let dg = slot(adj, *gain, n);
                    accumulate_rows(dg, g, |g, x| g * x, xhat);
                }
                if rg(*bias) {
                    let db = slot(adj, *bias, n);
                    accumulate_rows(db, g, |g, _| g, g);
                }
                if rg(*a) {
                    let dxhat: Vec<f64> = g.chunks_exact(n).flat_map(|row| row.iter().zip(gv).map(|(g, w)| g * w)).collect();
                    let dx = normalize_rows_backward(&dxhat, xhat, rstd, m, n);
                    slot(adj, *a, m * n).iter_mut().zip(dx).for_each(|(d, x)| *d += x);
                }
            }
            Op::BatchNorm { a, gain, bias, xhat, rstd, .. } => {
                let (m, n) = (out.rows(), out.cols());
                let gv = v(*gain);
                if rg(*gain) {
                    let dg = slot(adj, *gain, n);
                    accumulate_rows(dg, g, |g, x| g * x, xhat);
                }
                if rg(*bias) {
                    let db = slot(adj, *bias, n);
                    accumulate_rows(db, g, |g, _| g, g);
                }
                if rg(*a) {
                    let dxhat: Vec<f64> = g.chunks_exact(n).flat_map(|row| row.iter().zip(gv).map(|(g, w)| g * w)).collect();
                    let dxhat_t = Tensor::new(&[m, n], dxhat).expect("shape").transpose();
                    let xhat_t = Tensor::new(&[m, n], xhat.clone()).expect("shape").transpose();
                    let dx_t = normalize_rows_backward(dxhat_t.data(), xhat_t.data(), rstd, n, m);
                    let dx = Tensor::new(&[n, m], dx_t).expect("shape").transpose();
                    slot(adj, *a, m * n).iter_mut().zip(dx.data()).for_each(|(d, x)| *d += x);
                }
            }
            &Op::Gelu(a) => {
                let x = v(a);
                slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| *d += g[k] * gelu_grad(x[k]));
            }
            &Op::Relu(a) => {
                let x = v(a);
                slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| {
                    if x[k] > 0.0 {
                        *d += g[k]
                    }
                });
            }
            &Op::Sigmoid { a, lo, hi } => {
                let y = out.data();
                slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| {
                    if y[k] > lo && y[k] < hi {
                        *d += g[k] * y[k] * (1.0 - y[k])
                    }
                });
            }
            &Op::Log(a) => {
                let x = v(a);
                slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| *d += g[k] / x[k]);
            }
            &Op::Exp(a) => {
                let y = out.data();
                slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| *d += g[k] * y[k]);
            }
            &Op::Abs(a) => {
                let x = v(a);
                slot(adj, a, g.len()).iter_mut().enumerate().for_each(|(k, d)| {
                    if x[k] > 0.0 {
                        *d += g[k]
                    } else if x[k] < 0.0 {
                        *d -= g[k]
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len(p);
                    if rg(p) {
                        slot(adj, p, l).iter_mut().zip(&g[off..off + l]).for_each(|(d, g)| *d += g);
                    }
                    off += l;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.rows(), out.cols());
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].value.cols();
                    if rg(p) {
                        let dp = slot(adj, p, m * n);
                        for r in 0..m {
                            for c in 0..n {
                                dp[r * n + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += n;
                }
            }
            Op::Slice { a, rows, cols } => {
                let n = nodes[*a].value.cols();
                let w = cols.len();
                let da = slot(adj, *a, len(*a));
                for (ri, r) in rows.clone().enumerate() {
                    for c in 0..w {
                        da[r * n + cols.start + c] += g[ri * w + c];
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                let n = nodes[*a].value.cols();
                let da = slot(adj, *a, len(*a));
                for (k, src) in idx.iter().enumerate() {
                    if let Some(s) = src {
                        for c in 0..n {
                            da[s * n + c] += g[k * n + c];
                        }
                    }
                }
            }
            &Op::Focal { pred, target } => {
                if !rg(pred) {
                    return;
                }
                let (p, t) = (v(pred), v(target));
                let k = nodes[pred].value.cols();
                let b = nodes[pred].value.rows();
                let dp = slot(adj, pred, b * k);
                for r in 0..b {
                    let peaks = (0..k).filter(|&c| t[r * k + c] == 1.0).count().max(1) as f64;
                    for c in 0..k {
                        let (pv, tv) = (p[r * k + c], t[r * k + c]);
                        let d = if tv == 1.0 {
                            2.0 * (1.0 - pv) * pv.ln() - (1.0 - pv).powi(2) / pv
                        } else {
                            -(1.0 - tv).powi(4) * (2.0 * pv * (1.0 - pv).ln() - pv * pv / (1.0 - pv))
                        };
                        dp[r * k + c] += g[r] * d / peaks;
                    }
                }
            }
        }
    }
}

