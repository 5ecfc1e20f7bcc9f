//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the tape is topologically sorted by
//! construction and `backward` walks it once in reverse. A fresh tape per training
//! step is the gradient-zeroing mechanism.

use super::kernels::{gemm, gemm_new};
use super::Tensor;
use crate::error::{Error, Result};

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
    MatMul { a: Var, b: Var, b_t: bool },
    Transpose(Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Input and the forward `tanh` values.
    Gelu(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    Mse(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record. Single-threaded; independent tapes share nothing.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn mat_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::shape(op, format!("expected a matrix, got {other:?}"))),
    }
}

/// `1 − 2/(e^{2u}+1)`: one `exp` instead of libm's `expm1`-based `tanh`,
/// with absolute error near 1e-16.
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// NaN or ±inf anywhere turns the lane sums into NaN; written so it vectorizes.
pub(crate) fn all_finite(xs: &[f64]) -> bool {
    let mut acc = [0.0f64; 4];
    let mut chunks = xs.chunks_exact(4);
    for c in &mut chunks {
        for (a, v) in acc.iter_mut().zip(c) {
            *a += v * 0.0;
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|v| v * 0.0).sum();
    (acc[0] + acc[1] + acc[2] + acc[3] + tail) == 0.0
}

/// Adds `op(A)·op(B)` into a gradient slot, writing directly on first touch.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(slot: &mut Option<Vec<f64>>, m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool) {
    match slot {
        Some(c) => gemm(m, k, n, a, a_t, b, b_t, c, true),
        None => *slot = Some(gemm_new(m, k, n, a, a_t, b, b_t)),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::NotOnTape(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !all_finite(value.data()) {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for v in vars {
            self.node(*v)?;
        }
        Ok(())
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if requires_grad {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (m, k) = mat_dims(self.value(a), "matmul")?;
        let (k2, n) = mat_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents {k} vs {k2}")));
        }
        let out = gemm_new(m, k, n, self.value(a).data(), false, self.value(b).data(), false);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, b_t: false }, &[a, b])
    }

    /// `a (m×k) · bᵀ` for `b (n×k)`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (m, k) = mat_dims(self.value(a), "matmul_t")?;
        let (n, k2) = mat_dims(self.value(b), "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("inner extents {k} vs {k2}")));
        }
        let out = gemm_new(m, k, n, self.value(a).data(), false, self.value(b).data(), true);
        self.push("matmul_t", Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, b_t: true }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let (r, c) = mat_dims(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(&[a, b])?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", format!("{sa:?} vs trailing {sb:?}")));
        }
        let inner = self.value(b).numel();
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let value = Tensor::from_parts(sa.to_vec(), data);
        self.push("add_broadcast", value, Op::AddBroadcast(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(&[a])?;
        let value = Tensor::from_parts(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|v| v * s).collect(),
        );
        self.push("scale", value, Op::Scale(a, s), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let xs = self.value(a).data();
        let th: Vec<f64> = xs.iter().map(|&x| fast_tanh(GELU_C * (x + GELU_A * x * x * x))).collect();
        let data = xs.iter().zip(&th).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let value = Tensor::from_parts(self.value(a).shape().to_vec(), data);
        self.push("gelu", value, Op::Gelu(a, th), &[a])
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let value = softmax_lastdim(self.value(a));
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let d = self.value(x).cols();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape("layer_norm", format!("affine params must be [{d}]")));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(self.value(x).shape().to_vec(), out);
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let m = self.value(a).mean();
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Concatenation along the first axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{:?} vs tail {tail:?}", t.shape())));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push("concat_rows", Tensor::from_parts(shape, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Concatenation of matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.check(parts)?;
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let (rows, _) = mat_dims(self.value(*first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = mat_dims(self.value(*p), "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.value(*p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push("concat_cols", Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(&[a])?;
        let t = self.value(a);
        if t.rank() == 0 || len == 0 || start + len > t.shape()[0] {
            return Err(Error::shape("slice_rows", format!("{start}+{len} of {:?}", t.shape())));
        }
        let inner = t.numel() / t.shape()[0];
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        self.push("slice_rows", Tensor::from_parts(shape, data), Op::SliceRows { a, start }, &[a])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(&[a])?;
        let (r, c) = mat_dims(self.value(a), "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}+{len} of {c} columns")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![r, len], data), Op::SliceCols { a, start }, &[a])
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let (v, d) = mat_dims(self.value(table), "embedding")?;
        if ids.is_empty() {
            return Err(Error::Invalid("embedding lookup of zero ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} outside vocabulary of {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let t = self.value(a);
        let d = t.cols();
        let mut norms = Vec::with_capacity(t.numel() / d);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows { a, norms }, &[a])
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(s / ta.numel() as f64);
        self.push("mse", value, Op::Mse(a, b), &[a, b])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let (n, k) = mat_dims(self.value(logits), "cross_entropy")?;
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("cross_entropy", "labels do not match logits"));
        }
        let probs = softmax_lastdim(self.value(logits)).into_data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(probs[i * k + l].max(1e-300)).ln())
            .sum::<f64>()
            / n as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of `targets ∈ [0,1]` against sigmoid logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        self.check(&[logits])?;
        let x = self.value(logits).data();
        if targets.len() != x.len() {
            return Err(Error::shape("bce_with_logits", "targets do not match logits"));
        }
        let loss = x
            .iter()
            .zip(targets)
            .map(|(&v, &y)| v.max(0.0) - v * y + (-v.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            &[logits],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros when `v`
    /// did not influence the loss.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let node = self.node(v)?;
        let shape = node.value.shape().to_vec();
        Ok(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(Error::NotScalar(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if !grads.iter().flatten().all(|g| all_finite(g)) {
            return Err(Error::NonFinite("backward"));
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let len = |v: &Var| nodes[v.0].value.numel();
        let val = |v: &Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = g.len() / m;
                if wants(a) {
                    // dA = dC · op(B)ᵀ
                    gemm_acc(&mut grads[a.0], m, n, k, g, false, val(b), !b_t);
                }
                if wants(b) {
                    if *b_t {
                        // B is n×k: dB = dCᵀ · A
                        gemm_acc(&mut grads[b.0], n, m, k, g, true, val(a), false);
                    } else {
                        // dB = Aᵀ · dC
                        gemm_acc(&mut grads[b.0], k, m, n, val(a), true, g, false);
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let ga = accumulate(&mut grads[a.0], r * c);
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if wants(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(b) {
                    let inner = len(b);
                    let gb = accumulate(&mut grads[b.0], inner);
                    for chunk in g.chunks(inner) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if wants(b) {
                    let av = val(a);
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Gelu(a, tanh) => {
                if wants(a) {
                    let av = val(a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (((x, gi), &v), &th) in ga.iter_mut().zip(g).zip(av).zip(tanh) {
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *x += gi * d;
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(a) {
                    let d = nodes[i].value.cols();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((gr, yr), xr) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[x.0].value.cols();
                if wants(gamma) {
                    let gg = accumulate(&mut grads[gamma.0], d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(beta) {
                    let gb = accumulate(&mut grads[beta.0], d);
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if wants(x) {
                    let gam = val(gamma);
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, ((gr, hr), xr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            xr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let ga = accumulate(&mut grads[a.0], len(a));
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if wants(a) {
                    let n = len(a);
                    let ga = accumulate(&mut grads[a.0], n);
                    let s = g[0] / n as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = len(p);
                    if wants(p) {
                        let gp = accumulate(&mut grads[p.0], n);
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let rows = g.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if wants(p) {
                        let gp = accumulate(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRows { a, start } => {
                if wants(a) {
                    let src = &nodes[a.0].value;
                    let inner = src.numel() / src.shape()[0];
                    let ga = accumulate(&mut grads[a.0], src.numel());
                    let base = start * inner;
                    ga[base..base + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceCols { a, start } => {
                if wants(a) {
                    let c = nodes[a.0].value.cols();
                    let w = nodes[i].value.cols();
                    let ga = accumulate(&mut grads[a.0], len(a));
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            ga[r * c + start + j] += gr[j];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(table) {
                    let d = nodes[table.0].value.cols();
                    let gt = accumulate(&mut grads[table.0], len(table));
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                if wants(a) {
                    let d = nodes[i].value.cols();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for (r, ((gr, yr), xr)) in g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            xr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(a), val(b));
                let s = 2.0 * g[0] / av.len() as f64;
                if wants(a) {
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for ((x, p), q) in ga.iter_mut().zip(av).zip(bv) {
                        *x += s * (p - q);
                    }
                }
                if wants(b) {
                    let gb = accumulate(&mut grads[b.0], bv.len());
                    for ((x, p), q) in gb.iter_mut().zip(av).zip(bv) {
                        *x -= s * (p - q);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(logits) {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let s = g[0] / n as f64;
                    let gl = accumulate(&mut grads[logits.0], probs.len());
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let target = if j == l { 1.0 } else { 0.0 };
                            gl[r * k + j] += s * (probs[r * k + j] - target);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if wants(logits) {
                    let x = val(logits);
                    let s = g[0] / x.len() as f64;
                    let gl = accumulate(&mut grads[logits.0], x.len());
                    for ((gi, &v), &y) in gl.iter_mut().zip(x).zip(targets) {
                        *gi += s * (sigmoid(v) - y);
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
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

/// Row-wise softmax over the last dimension with max subtraction.
pub(crate) fn softmax_lastdim(t: &Tensor) -> Tensor {
    let d = t.cols();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::from_parts(t.shape().to_vec(), data)
}
