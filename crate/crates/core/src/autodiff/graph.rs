use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter owned outside the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    MeanLast(Var),
    MaxLast { x: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Conv1d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LogSoftmaxRows(Var),
    OffDiag(Var),
    PickPerRow { x: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode differentiation graph.
///
/// Nodes are appended in evaluation order, so the node list is already
/// topologically sorted and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf; zeros when the leaf does not reach the loss.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.leaves
            .get(&v.0)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// View a rank-2 or rank-3 tensor as `[n, channels, length]`.
fn channel_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, l] => Ok((*n, *c, *l)),
        s => shape_err(format!("batch norm expects rank 2 or 3, got {s:?}")),
    }
}

impl Graph {
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

    /// True when every recorded value is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.all_finite())
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Differentiable input that is not a registered parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Differentiable parameter leaf reported in [`Gradients::param`].
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.leaf(value, true);
        self.params.push((id, v));
        v
    }

    /// Stop-gradient: a constant copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    // ---------------------------------------------------------------
    // linear algebra
    // ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return shape_err(format!("matmul inner dimensions {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a]))
    }

    /// `x[r, :] + bias` for every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        if self.value(bias).len() != d {
            return shape_err(format!("bias of length {} for {d} columns", self.value(bias).len()));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        Ok(self.push(Tensor::new(vec![r, d], out)?, Op::AddBias(x, bias), &[x, bias]))
    }

    // ---------------------------------------------------------------
    // elementwise
    // ---------------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        Ok(self.push(t, Op::Scale(x, c), &[x]))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        Ok(self.push(t, Op::AddScalar(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(0.0));
        Ok(self.push(t, Op::Relu(x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        Ok(self.push(t, Op::Tanh(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        Ok(self.push(t, Op::Sigmoid(x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        if !t.all_finite() {
            return Err(Error::Numeric("exp overflow".into()));
        }
        Ok(self.push(t, Op::Exp(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let t = self.value(x).map(f64::ln);
        Ok(self.push(t, Op::Log(x), &[x]))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Numeric("sqrt of a non-positive value".into()));
        }
        let t = self.value(x).map(f64::sqrt);
        Ok(self.push(t, Op::Sqrt(x), &[x]))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        Ok(self.push(t, Op::Square(x), &[x]))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(softplus);
        Ok(self.push(t, Op::Softplus(x), &[x]))
    }

    // ---------------------------------------------------------------
    // reductions
    // ---------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), &[x]))
    }

    /// Column sums of a matrix: `[r, d] -> [d]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.push(Tensor::new(vec![d], out)?, Op::SumRows(x), &[x]))
    }

    /// Column means of a matrix: `[r, d] -> [d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.value(x).dims2()?;
        let s = self.sum_rows(x)?;
        self.scale(s, 1.0 / r as f64)
    }

    /// Row sums of a matrix: `[r, d] -> [r]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        let out = self.value(x).data().chunks(d).map(|row| row.iter().sum()).collect();
        Ok(self.push(Tensor::new(vec![r], out)?, Op::SumCols(x), &[x]))
    }

    fn split_last(t: &Tensor) -> Result<(Vec<usize>, usize)> {
        let s = t.shape();
        if s.len() < 2 {
            return shape_err(format!("reduction over the last axis needs rank >= 2, got {s:?}"));
        }
        Ok((s[..s.len() - 1].to_vec(), s[s.len() - 1]))
    }

    /// Mean over the last axis; on `[n, c, l]` this is global average pooling.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let (lead, l) = Self::split_last(self.value(x))?;
        let out = self
            .value(x)
            .data()
            .chunks(l)
            .map(|c| c.iter().sum::<f64>() / l as f64)
            .collect();
        Ok(self.push(Tensor::new(lead, out)?, Op::MeanLast(x), &[x]))
    }

    /// Global average pooling over time: `[n, c, l] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims3()?;
        self.mean_last(x)
    }

    /// Maximum over the last axis; the gradient flows to the first maximiser.
    pub fn max_over(&mut self, x: Var) -> Result<Var> {
        let (lead, l) = Self::split_last(self.value(x))?;
        let mut out = Vec::new();
        let mut argmax = Vec::new();
        for chunk in self.value(x).data().chunks(l) {
            let (mut best, mut at) = (chunk[0], 0);
            for (i, &v) in chunk.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    at = i;
                }
            }
            out.push(best);
            argmax.push(at);
        }
        Ok(self.push(Tensor::new(lead, out)?, Op::MaxLast { x, argmax }, &[x]))
    }

    // ---------------------------------------------------------------
    // structural
    // ---------------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (rr, c) = self.value(*p).dims2()?;
            if rr != r {
                return shape_err(format!("concat_cols row mismatch {rr} vs {r}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenate along the first axis; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let s = self.value(*p).shape();
            if s[1..] != tail[..] {
                return shape_err(format!("concat_rows trailing dims {:?} vs {tail:?}", &s[1..]));
            }
            rows += s[0];
            out.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return shape_err(format!("column slice {start}..{} of {c}", start + len));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, &[x]))
    }

    /// Contiguous slice along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if len == 0 || start + len > s[0] {
            return shape_err(format!("row slice {start}..{} of {}", start + len, s[0]));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceRows { x, start }, &[x]))
    }

    /// Select entries along the first axis (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return shape_err(format!("gather indices out of range for {} rows", s[0]));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ---------------------------------------------------------------
    // fused ops
    // ---------------------------------------------------------------

    /// Row-wise `x / sqrt(|x|^2 + eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, d) = match self.value(x).shape() {
            [d] => (1, *d),
            _ => self.value(x).dims2()?,
        };
        let shape = self.value(x).shape().to_vec();
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for row in out.chunks_mut(d) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Row-wise cosine similarity of two equally shaped matrices: `[r]`.
    pub fn cosine_sim(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "cosine_sim")?;
        let (a, b) = if self.value(a).rank() == 1 {
            let d = self.value(a).len();
            (self.reshape(a, &[1, d])?, self.reshape(b, &[1, d])?)
        } else {
            (a, b)
        };
        let na = self.l2_normalize_rows(a, eps)?;
        let nb = self.l2_normalize_rows(b, eps)?;
        let p = self.mul(na, nb)?;
        self.sum_cols(p)
    }

    /// Cross-correlation of `[n, c_in, p]` input with `[c_out, c_in, k]` kernels.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, c_in, len_in) = self.value(x).dims3()?;
        let (c_out, wc_in, kernel) = self.value(w).dims3()?;
        if wc_in != c_in {
            return shape_err(format!("conv1d kernel expects {wc_in} input channels, got {c_in}"));
        }
        if stride == 0 {
            return shape_err("conv1d stride must be positive");
        }
        if kernel > len_in + 2 * padding {
            return shape_err(format!(
                "conv1d kernel {kernel} wider than padded input {}",
                len_in + 2 * padding
            ));
        }
        let len_out = (len_in + 2 * padding - kernel) / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            len_in,
            c_out,
            kernel,
            stride,
            padding,
            len_out,
        };
        let out = kernels::conv1d_forward(&geom, self.value(x).data(), self.value(w).data());
        Ok(self.push(
            Tensor::new(vec![batch, c_out, len_out], out)?,
            Op::Conv1d { x, w, geom },
            &[x, w],
        ))
    }

    /// Train-mode batch normalisation over `[n, c]` or `[n, c, l]`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, l) = channel_dims(self.value(x))?;
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "train-mode batch norm needs at least 2 samples, got {n}"
            )));
        }
        self.check_affine(gamma, beta, c)?;
        let m = (n * l) as f64;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let seg = &src[(i * c + ch) * l..(i * c + ch + 1) * l];
                mean[ch] += seg.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let seg = &src[(i * c + ch) * l..(i * c + ch + 1) * l];
                var[ch] += seg.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.iter().map(|v| v * m / (m - 1.0)).collect(),
        };
        let v = self.batch_norm_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((v, stats))
    }

    /// Eval-mode batch normalisation using fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = channel_dims(self.value(x))?;
        self.check_affine(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return shape_err("running statistics length mismatch");
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, mean, &inv_std, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err(format!("batch norm affine parameters must have {c} entries"));
        }
        Ok(())
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        train: bool,
    ) -> Result<Var> {
        let (n, c, l) = channel_dims(self.value(x))?;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * l;
                for j in base..base + l {
                    let h = (src[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.to_vec(),
            train,
        };
        Ok(self.push(Tensor::new(shape, out)?, op, &[x, gamma, beta]))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(Tensor::new(vec![r, d], out)?, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Drop the diagonal of a square matrix: `[n, n] -> [n, n-1]`.
    pub fn off_diagonal(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if r != c || r < 2 {
            return shape_err(format!("off_diagonal needs a square matrix with n >= 2, got {r}x{c}"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * (r - 1));
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    out.push(src[i * r + j]);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![r, r - 1], out)?, Op::OffDiag(x), &[x]))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return shape_err("pick_per_row indices do not match the matrix");
        }
        let src = self.value(x).data();
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        Ok(self.push(Tensor::new(vec![r], out)?, Op::PickPerRow { x, idx: idx.to_vec() }, &[x]))
    }

    // ---------------------------------------------------------------
    // backward
    // ---------------------------------------------------------------

    /// Reverse sweep from a scalar loss.
    ///
    /// Every registered parameter appears in the result; parameters that do
    /// not reach the loss get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        let mut params = BTreeMap::new();
        for &(id, v) in &self.params {
            let g = leaves
                .get(&v.0)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            // Parameters bound more than once accumulate.
            params
                .entry(id)
                .and_modify(|acc: &mut Tensor| {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b)
                })
                .or_insert(g);
        }
        Ok(Gradients { leaves, params })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                acc(*a, &mut |da| kernels::gemm(m, n, k, g, false, val(*b), true, da, true));
                acc(*b, &mut |db| kernels::gemm(k, m, n, val(*a), true, g, false, db, true));
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |dx| add_into(dx, g));
                let d = self.nodes[b.0].value.len();
                acc(*b, &mut |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| zip3(da, g, bv, |g, b| g * b));
                acc(*b, &mut |db| zip3(db, g, av, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |da| zip3(da, g, bv, |g, b| g / b));
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| zip2(dx, g, |g| g * c)),
            Op::AddScalar(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| zip3(dx, g, xv, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Tanh(x) => acc(*x, &mut |dx| zip3(dx, g, y, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(x) => acc(*x, &mut |dx| zip3(dx, g, y, |g, y| g * y * (1.0 - y))),
            Op::Exp(x) => acc(*x, &mut |dx| zip3(dx, g, y, |g, y| g * y)),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| zip3(dx, g, xv, |g, x| g / x));
            }
            Op::Sqrt(x) => acc(*x, &mut |dx| zip3(dx, g, y, |g, y| 0.5 * g / y)),
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| zip3(dx, g, xv, |g, x| 2.0 * g * x));
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| zip3(dx, g, xv, |g, x| g * sigmoid(x)));
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => acc(*x, &mut |dx| {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s)
            }),
            Op::SumRows(x) => acc(*x, &mut |dx| {
                for row in dx.chunks_mut(g.len()) {
                    add_into(row, g);
                }
            }),
            Op::SumCols(x) => acc(*x, &mut |dx| {
                let d = dx.len() / g.len();
                for (row, gi) in dx.chunks_mut(d).zip(g) {
                    row.iter_mut().for_each(|v| *v += gi);
                }
            }),
            Op::MeanLast(x) => acc(*x, &mut |dx| {
                let l = dx.len() / g.len();
                for (row, gi) in dx.chunks_mut(l).zip(g) {
                    row.iter_mut().for_each(|v| *v += gi / l as f64);
                }
            }),
            Op::MaxLast { x, argmax } => acc(*x, &mut |dx| {
                let l = dx.len() / g.len();
                for (i, (&a, gi)) in argmax.iter().zip(g).enumerate() {
                    dx[i * l + a] += gi;
                }
            }),
            Op::ConcatCols(parts) => {
                let r = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(*p, &mut |dp| {
                        for i in 0..r {
                            add_into(&mut dp[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(*p, &mut |dp| add_into(dp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, len) = node.value.dims2().unwrap();
                let c = self.nodes[x.0].value.shape()[1];
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        add_into(&mut dx[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let inner = node.value.len() / node.value.shape()[0];
                acc(*x, &mut |dx| add_into(&mut dx[start * inner..start * inner + g.len()], g));
            }
            Op::GatherRows { x, idx } => {
                let inner = node.value.len() / idx.len();
                acc(*x, &mut |dx| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * inner..(i + 1) * inner], &g[k * inner..(k + 1) * inner]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| add_into(dx, g)),
            Op::L2NormalizeRows { x, norms } => {
                let d = node.value.len() / norms.len();
                acc(*x, &mut |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // dx = g/n - x (g·x)/n^3 = (g - y (g·y))/n
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * gy) / n;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, geom } => {
                let (dx, dw) = kernels::conv1d_backward(geom, val(*x), val(*w), g, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    acc(*x, &mut |d| add_into(d, &dx));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| add_into(d, &dw));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, l) = channel_dims(&node.value).unwrap();
                let gv = val(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * l;
                        for j in base..base + l {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                acc(*gamma, &mut |dg| add_into(dg, &sum_gx));
                acc(*beta, &mut |db| add_into(db, &sum_g));
                let m = (n * l) as f64;
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * l;
                            let k = gv[ch] * inv_std[ch];
                            for j in base..base + l {
                                dx[j] += if *train {
                                    k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let d = node.value.shape()[1];
                acc(*x, &mut |dx| {
                    for (r, (yr, gr)) in y.chunks(d).zip(g.chunks(d)).enumerate() {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..d {
                            dx[r * d + j] += gr[j] - yr[j].exp() * gs;
                        }
                    }
                });
            }
            Op::OffDiag(x) => {
                let n = node.value.shape()[0];
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        let mut k = 0;
                        for j in 0..n {
                            if i != j {
                                dx[i * n + j] += g[i * (n - 1) + k];
                                k += 1;
                            }
                        }
                    }
                });
            }
            Op::PickPerRow { x, idx } => {
                let c = self.nodes[x.0].value.shape()[1];
                acc(*x, &mut |dx| {
                    for (i, &j) in idx.iter().enumerate() {
                        dx[i * c + j] += g[i];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip2(dst: &mut [f64], g: &[f64], f: impl Fn(f64) -> f64) {
    dst.iter_mut().zip(g).for_each(|(d, &g)| *d += f(g));
}

fn zip3(dst: &mut [f64], g: &[f64], o: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &o) in dst.iter_mut().zip(g).zip(o) {
        *d += f(g, o);
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
