//! Recorded computation tape with explicit per-op backward rules.
//!
//! Every op appends a node holding its forward value; `backward` walks the tape in
//! reverse and accumulates gradients into the inputs of each node. Matrices are 2-D
//! row-major tensors, images are `N×C×H×W`.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulCol { a: Var, col: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log { x: Var, eps: f64 },
    Sqrt(Var),
    SoftmaxNull(Var),
    DropLastCol(Var),
    RowMax { a: Var, argmax: Vec<Option<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { a: Var, idx: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    MaskedRowSum { a: Var, mask: Tensor },
    LogSoftmaxRows(Var),
    Conv3x3 { x: Var, w: Var, b: Var },
    AvgPool2(Var),
    ChannelNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GlobalAvgPool(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one scalar output with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `[row, 0]`.
pub(crate) fn softmax_null_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(0.0_f64, |m, &v| m.max(v));
    let mut out: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    out.push((-m).exp());
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Normalises groups of values; returns (xhat, inv_std per group).
fn normalize_groups(groups: &[Vec<usize>], x: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(groups.len());
    for g in groups {
        let n = g.len().max(1) as f64;
        let mean = g.iter().map(|&i| x[i]).sum::<f64>() / n;
        let var = g.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for &i in g {
            xhat[i] = (x[i] - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

fn normalize_groups_backward(
    groups: &[Vec<usize>],
    xhat: &[f64],
    inv_std: &[f64],
    dxhat: &[f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; xhat.len()];
    for (g, &is) in groups.iter().zip(inv_std) {
        let n = g.len() as f64;
        let sum_d: f64 = g.iter().map(|&i| dxhat[i]).sum();
        let sum_dx: f64 = g.iter().map(|&i| dxhat[i] * xhat[i]).sum();
        for &i in g {
            dx[i] = is / n * (n * dxhat[i] - sum_d - xhat[i] * sum_dx);
        }
    }
    dx
}

fn row_groups(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    (0..rows).map(|r| (r * cols..(r + 1) * cols).collect()).collect()
}

fn channel_groups(shape: &[usize]) -> Vec<Vec<usize>> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    (0..c)
        .map(|ch| {
            (0..n)
                .flat_map(|b| {
                    let base = (b * c + ch) * hw;
                    base..base + hw
                })
                .collect()
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.leaf(store.value(id).clone());
        self.params.insert(id, v);
        Ok(v)
    }

    /// Adds the gradients of bound parameters into the store's gradient slots.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.wrt(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// `y = x Wᵀ (+ b)` with `x: n×in`, `W: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.dims2(x, "linear")?;
        let (o, wi) = self.dims2(w, "linear")?;
        if i != wi {
            return Err(shape_err("linear", format!("input width {i} vs weight {o}x{wi}")));
        }
        let mut y = matmul_bt(self.value(x).data(), self.value(w).data(), n, i, o);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(shape_err("linear", format!("bias of length {} for {o} outputs", bv.len())));
            }
            for row in y.chunks_mut(o.max(1)).take(n) {
                for (v, bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        Ok(self.push(Tensor::matrix(n, o, y)?, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let y = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, y)?, Op::MatMul(a, b)))
    }

    /// `a bᵀ` with `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (n, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let y = matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, y)?, Op::MatMulBt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2(a, "transpose")?;
        let t = self.value(a).transpose();
        Ok(self.push(t, Op::Transpose(a)))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        self.push(t, Op::AddConst(a))
    }

    /// Adds a constant (non-differentiable) tensor.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err("add_const", format!("{:?} vs {:?}", self.shape(a), c.shape())));
        }
        let data = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(c.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddConst(a)))
    }

    /// Scales each row of `a` (m×n) by the matching entry of `col` (m×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "mul_col")?;
        if self.shape(col) != [m, 1] {
            return Err(shape_err("mul_col", format!("column {:?} for {m} rows", self.shape(col))));
        }
        let c = self.value(col).data().to_vec();
        let mut t = self.value(a).clone();
        for (i, row) in t.data_mut().chunks_mut(n.max(1)).take(m).enumerate() {
            row.iter_mut().for_each(|v| *v *= c[i]);
        }
        Ok(self.push(t, Op::MulCol { a, col }))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err("layer_norm", format!("affine params do not match width {c}")));
        }
        let rows = xv.len() / c.max(1);
        let groups = row_groups(rows, c);
        let (xhat, inv_std) = normalize_groups(&groups, xv.data(), LN_EPS);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let y: Vec<f64> = xhat.iter().enumerate().map(|(i, &h)| g[i % c] * h + b[i % c]).collect();
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        self.push(t, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    /// `ln(max(x, eps))`.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x).map(|v| v.max(eps).ln());
        self.push(t, Op::Log { x, eps })
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x).map(|v| (v + eps).max(0.0).sqrt());
        self.push(t, Op::Sqrt(x))
    }

    /// Appends a zero logit to every row and applies a row-wise softmax: `T×D -> T×(D+1)`.
    pub fn softmax_null(&mut self, x: Var) -> Result<Var> {
        let (t, d) = self.dims2(x, "softmax_null")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(t * (d + 1));
        for i in 0..t {
            out.extend(softmax_null_row(&xv.data()[i * d..(i + 1) * d]));
        }
        let y = Tensor::matrix(t, d + 1, out)?;
        Ok(self.push(y, Op::SoftmaxNull(x)))
    }

    pub fn drop_last_col(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "drop_last_col")?;
        if n == 0 {
            return Err(shape_err("drop_last_col", "no column to drop".into()));
        }
        let av = self.value(a);
        let data = (0..m).flat_map(|i| av.row(i)[..n - 1].to_vec()).collect();
        let t = Tensor::matrix(m, n - 1, data)?;
        Ok(self.push(t, Op::DropLastCol(a)))
    }

    /// Row-wise maximum, `m×n -> m×1`; rows of an `m×0` matrix give 0.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "row_max")?;
        let av = self.value(a);
        let mut argmax = Vec::with_capacity(m);
        let mut vals = Vec::with_capacity(m);
        for i in 0..m {
            if n == 0 {
                argmax.push(None);
                vals.push(0.0);
                continue;
            }
            let row = av.row(i);
            let (j, v) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bj, bv), (j, &v)| if v > bv { (j, v) } else { (bj, bv) });
            argmax.push(Some(j));
            vals.push(v);
        }
        let t = Tensor::matrix(m, 1, vals)?;
        Ok(self.push(t, Op::RowMax { a, argmax }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.dims2(p, "concat_cols")?.0,
            None => return Err(shape_err("concat_cols", "no parts".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(shape_err("concat_cols", format!("{r} rows vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::matrix(m, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks matrices with equal width; `cols` fixes the width when `parts` is empty.
    pub fn concat_rows(&mut self, parts: &[Var], cols: usize) -> Result<Var> {
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} cols vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(a, "select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("select_rows", format!("row {bad} of {m}")));
        }
        let av = self.value(a);
        let data = idx.iter().flat_map(|&i| av.row(i).to_vec()).collect();
        let t = Tensor::matrix(idx.len(), n, data)?;
        Ok(self.push(t, Op::SelectRows { a, idx: idx.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean over all entries; the mean of an empty tensor is 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() { 0.0 } else { v.sum() / v.len() as f64 };
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims2(a, "row_sum")?;
        let av = self.value(a);
        let data = (0..m).map(|i| av.row(i).iter().sum()).collect();
        let t = Tensor::matrix(m, 1, data)?;
        Ok(self.push(t, Op::RowSum(a)))
    }

    /// `y_i = Σ_j a_ij mask_ij`, `m×n -> m×1`.
    pub fn masked_row_sum(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let (m, n) = self.dims2(a, "masked_row_sum")?;
        if mask.shape() != [m, n] {
            return Err(shape_err("masked_row_sum", format!("mask {:?} for {m}x{n}", mask.shape())));
        }
        let av = self.value(a);
        let data = (0..m)
            .map(|i| av.row(i).iter().zip(mask.row(i)).map(|(x, k)| x * k).sum())
            .collect();
        let t = Tensor::matrix(m, 1, data)?;
        Ok(self.push(t, Op::MaskedRowSum { a, mask }))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "log_softmax_rows")?;
        let av = self.value(a);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = av.row(i);
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::LogSoftmaxRows(a)))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1: `N×Cin×H×W -> N×Cout×H×W`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(shape_err("conv3x3", format!("input {xs:?}, kernel {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(shape_err("conv3x3", format!("{} input channels vs kernel {}", xs[1], ws[1])));
        }
        if self.value(b).len() != ws[0] {
            return Err(shape_err("conv3x3", "bias length".into()));
        }
        let y = conv3x3_forward(self.value(x), self.value(w), self.value(b));
        Ok(self.push(y, Op::Conv3x3 { x, w, b }))
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("avg_pool2", format!("{s:?}")));
        }
        let y = avg_pool2_forward(self.value(x));
        Ok(self.push(y, Op::AvgPool2(x)))
    }

    /// Per-channel normalisation over batch and pixels of an `N×C×H×W` tensor.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("channel_norm", format!("{s:?}")));
        }
        let groups = channel_groups(&s);
        let (xhat, inv_std) = normalize_groups(&groups, self.value(x).data(), NORM_EPS);
        let t = Tensor::new(s, xhat.clone())?;
        Ok(self.push(t, Op::ChannelNorm { x, xhat, inv_std }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw.max(1))
            .take(s[0] * s[1])
            .map(|c| c.iter().sum::<f64>() / hw.max(1) as f64)
            .collect();
        let t = Tensor::matrix(s[0], s[1], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(x)))
    }

    /// Distance of the recorded computation to its nearest non-differentiable
    /// point: the smallest ReLU input magnitude or row-max gap to the runner-up.
    /// `None` when the tape has no such op.
    pub fn kink_margin(&self) -> Option<f64> {
        let mut margin: Option<f64> = None;
        let mut take = |m: f64| margin = Some(margin.map_or(m, |old: f64| old.min(m)));
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.value(*x).data() {
                        take(v.abs());
                    }
                }
                Op::RowMax { a, .. } => {
                    let av = self.value(*a);
                    for i in 0..av.rows() {
                        let mut row = av.row(i).to_vec();
                        if row.len() > 1 {
                            row.sort_by(|x, y| y.total_cmp(x));
                            take(row[0] - row[1]);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::full(self.shape(out), 1.0));
        for i in (0..=out.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot => *slot = Some(t),
        };
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data).expect("grad shape");
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, inp) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                acc(*x, like(*x, matmul(gd, self.value(*w).data(), n, o, inp)));
                acc(*w, like(*w, matmul_at(gd, self.value(*x).data(), n, o, inp)));
                if let Some(b) = b {
                    let mut db = vec![0.0; o];
                    for r in 0..n {
                        for (d, v) in db.iter_mut().zip(&gd[r * o..(r + 1) * o]) {
                            *d += v;
                        }
                    }
                    acc(*b, like(*b, db));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, like(*a, matmul_bt(gd, self.value(*b).data(), m, n, k)));
                acc(*b, like(*b, matmul_at(self.value(*a).data(), gd, m, k, n)));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                acc(*a, like(*a, matmul(gd, self.value(*b).data(), m, n, k)));
                acc(*b, like(*b, matmul_at(gd, self.value(*a).data(), m, n, k)));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, like(*a, gd.iter().zip(bv).map(|(g, b)| g * b).collect()));
                acc(*b, like(*b, gd.iter().zip(av).map(|(g, a)| g * a).collect()));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::AddConst(a) => acc(*a, like(*a, gd.to_vec())),
            Op::MulCol { a, col } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                let mut da = vec![0.0; m * n];
                let mut dc = vec![0.0; m];
                for r in 0..m {
                    for j in 0..n {
                        da[r * n + j] = gd[r * n + j] * cv[r];
                        dc[r] += gd[r * n + j] * av[r * n + j];
                    }
                }
                acc(*a, like(*a, da));
                acc(*col, like(*col, dc));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dxhat = vec![0.0; gd.len()];
                for (idx, &gv) in gd.iter().enumerate() {
                    dg[idx % c] += gv * xhat[idx];
                    db[idx % c] += gv;
                    dxhat[idx] = gv * gam[idx % c];
                }
                let groups = row_groups(gd.len() / c.max(1), c);
                acc(*x, like(*x, normalize_groups_backward(&groups, xhat, inv_std, &dxhat)));
                acc(*gamma, like(*gamma, dg));
                acc(*beta, like(*beta, db));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, like(*x, gd.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect()));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, like(*x, gd.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                acc(*x, like(*x, gd.iter().zip(yv).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Log { x, eps } => {
                let xv = self.value(*x).data();
                acc(*x, like(*x, gd.iter().zip(xv).map(|(g, &v)| if v > *eps { g / v } else { 0.0 }).collect()));
            }
            Op::Sqrt(x) => {
                let yv = node.value.data();
                acc(*x, like(*x, gd.iter().zip(yv).map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 }).collect()));
            }
            Op::SoftmaxNull(x) => {
                let (t, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let y = node.value.data();
                let mut dx = vec![0.0; t * d];
                for r in 0..t {
                    let yr = &y[r * (d + 1)..(r + 1) * (d + 1)];
                    let gr = &gd[r * (d + 1)..(r + 1) * (d + 1)];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::DropLastCol(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n..r * n + n - 1].copy_from_slice(&gd[r * (n - 1)..(r + 1) * (n - 1)]);
                }
                acc(*a, like(*a, da));
            }
            Op::RowMax { a, argmax } => {
                let n = self.shape(*a)[1];
                let mut da = vec![0.0; self.value(*a).len()];
                for (r, j) in argmax.iter().enumerate() {
                    if let Some(j) = j {
                        da[r * n + j] += gd[r];
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(m * c);
                    for r in 0..m {
                        dp.extend_from_slice(&gd[r * total + off..r * total + off + c]);
                    }
                    acc(p, like(p, dp));
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, like(p, gd[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::SelectRows { a, idx } => {
                let n = self.shape(*a)[1];
                let mut da = vec![0.0; self.value(*a).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[src * n + j] += gd[r * n + j];
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::Reshape(a) => acc(*a, like(*a, gd.to_vec())),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), gd[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                acc(*a, Tensor::full(self.shape(*a), gd[0] / n));
            }
            Op::RowSum(a) => {
                let n = self.shape(*a)[1];
                let da = gd.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                acc(*a, like(*a, da));
            }
            Op::MaskedRowSum { a, mask } => {
                let n = self.shape(*a)[1];
                let da = mask.data().iter().enumerate().map(|(k, m)| m * gd[k / n.max(1)]).collect();
                acc(*a, like(*a, da));
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let y = node.value.data();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let gs: f64 = gd[r * n..(r + 1) * n].iter().sum();
                    for j in 0..n {
                        da[r * n + j] = gd[r * n + j] - y[r * n + j].exp() * gs;
                    }
                }
                acc(*a, like(*a, da));
            }
            Op::Conv3x3 { x, w, b } => {
                let (dx, dw, db) = conv3x3_backward(self.value(*x), self.value(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, like(*b, db));
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let v = gd[nc * ho * wo + i * wo + j] / 4.0;
                            for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dx[nc * h * w + (2 * i + di) * w + 2 * j + dj] += v;
                            }
                        }
                    }
                }
                acc(*x, like(*x, dx));
            }
            Op::ChannelNorm { x, xhat, inv_std } => {
                let groups = channel_groups(self.shape(*x));
                acc(*x, like(*x, normalize_groups_backward(&groups, xhat, inv_std, gd)));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let dx = gd.iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
                acc(*x, like(*x, dx));
            }
        }
    }
}

pub(crate) fn conv3x3_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let (xv, wv, bv) = (x.data(), w.data(), b.data());
    let mut y = vec![0.0; n * co * h * wd];
    for bi in 0..n {
        for o in 0..co {
            let out = &mut y[(bi * co + o) * h * wd..(bi * co + o + 1) * h * wd];
            out.iter_mut().for_each(|v| *v = bv[o]);
            for c in 0..ci {
                let plane = &xv[(bi * ci + c) * h * wd..(bi * ci + c + 1) * h * wd];
                let k = &wv[(o * ci + c) * 9..(o * ci + c + 1) * 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let kv = k[ky * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for yy in 0..h {
                            let sy = yy as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let srow = &plane[sy as usize * wd..(sy as usize + 1) * wd];
                            let orow = &mut out[yy * wd..(yy + 1) * wd];
                            for (xx, o_) in orow.iter_mut().enumerate() {
                                let sx = xx as isize + kx as isize - 1;
                                if sx >= 0 && sx < wd as isize {
                                    *o_ += kv * srow[sx as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, h, wd], y).expect("conv shape")
}

fn conv3x3_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = w.shape()[0];
    let (xv, wv, gv) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0; xv.len()];
    let mut dw = vec![0.0; wv.len()];
    let mut db = vec![0.0; co];
    for bi in 0..n {
        for o in 0..co {
            let go = &gv[(bi * co + o) * h * wd..(bi * co + o + 1) * h * wd];
            db[o] += go.iter().sum::<f64>();
            for c in 0..ci {
                let base = (bi * ci + c) * h * wd;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = (o * ci + c) * 9 + ky * 3 + kx;
                        let kv = wv[widx];
                        let mut acc_w = 0.0;
                        for yy in 0..h {
                            let sy = yy as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..wd {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                let src = base + sy as usize * wd + sx as usize;
                                let gval = go[yy * wd + xx];
                                acc_w += gval * xv[src];
                                dx[src] += gval * kv;
                            }
                        }
                        dw[widx] += acc_w;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape"),
        db,
    )
}

pub(crate) fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let xv = x.data();
    let mut y = vec![0.0; n * c * ho * wo];
    for nc in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                let p = |di: usize, dj: usize| xv[nc * h * w + (2 * i + di) * w + 2 * j + dj];
                y[nc * ho * wo + i * wo + j] = (p(0, 0) + p(0, 1) + p(1, 0) + p(1, 1)) / 4.0;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], y).expect("pool shape")
}
