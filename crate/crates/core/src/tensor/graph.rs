use std::collections::BTreeMap;

use super::{matmul_nt_raw, matmul_raw, matmul_tn_raw, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Batch-norm behaviour: batch statistics (and running-stat updates) or
/// stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LogSumExp(Var, usize),
    MaxPool { input: Var, argmax: Vec<usize> },
    Gather { input: Var, indices: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Sum(Var),
    BatchNormTrain { input: Var, gamma: Var, beta: Var, x_hat: Tensor, inv_std: Vec<f64> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, inv_std: Vec<f64>, x_hat: Tensor },
    Attention { q: Var, k: Var, v: Var, scale: f64 },
    PadSlack(Var, Var),
    Sinkhorn { input: Var, us: Vec<Vec<f64>>, vs: Vec<Vec<f64>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A recorded computation. Ops append nodes; [`Graph::backward`] walks them
/// in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    mode: Mode,
    record: bool,
    bn_updates: Vec<BnUpdate>,
}

/// Decomposes `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}

fn strides4(shape: &[usize; 4]) -> [usize; 4] {
    let mut s = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        s[d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.len() > 4 {
        return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let out4 = pad4(&shape);
    let sa = strides4(&pad4(a.shape()));
    let sb = strides4(&pad4(b.shape()));
    let mut data = Vec::with_capacity(shape.iter().product());
    for i0 in 0..out4[0] {
        for i1 in 0..out4[1] {
            for i2 in 0..out4[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out4[3] {
                    data.push(f(a.data()[base_a + i3 * sa[3]], b.data()[base_b + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::new(shape, data)
}

/// Sums `grad` down to `shape` over broadcast dimensions.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let g4 = pad4(grad.shape());
    let st = strides4(&pad4(shape));
    let mut out = Tensor::zeros(shape);
    let mut idx = 0;
    for i0 in 0..g4[0] {
        for i1 in 0..g4[1] {
            for i2 in 0..g4[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..g4[3] {
                    out.data_mut()[base + i3 * st[3]] += grad.data()[idx];
                    idx += 1;
                }
            }
        }
    }
    out
}

fn softmax_along(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (d[at(l)] - max).exp();
                d[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                d[at(l)] /= total;
            }
        }
    }
    out
}

/// `log Σ exp(row + offset)` of every row of a `rows × cols` matrix.
fn lse_rows(z: &[f64], rows: usize, cols: usize, offset: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            let r = &z[i * cols..(i + 1) * cols];
            let max = r.iter().zip(offset).map(|(a, b)| a + b).fold(f64::NEG_INFINITY, f64::max);
            max + r.iter().zip(offset).map(|(a, b)| (a + b - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

fn lse_cols(z: &[f64], rows: usize, cols: usize, offset: &[f64]) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; cols];
    for i in 0..rows {
        for j in 0..cols {
            max[j] = max[j].max(z[i * cols + j] + offset[i]);
        }
    }
    let mut acc = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            acc[j] += (z[i * cols + j] + offset[i] - max[j]).exp();
        }
    }
    acc.iter().zip(&max).map(|(a, m)| m + a.ln()).collect()
}

impl Graph {
    /// A recording graph that supports [`Graph::backward`].
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            mode,
            record: true,
            bn_updates: Vec::new(),
        }
    }

    /// A graph that only evaluates; intermediate values may be released with
    /// [`Graph::retain_only`].
    pub fn no_grad(mode: Mode) -> Self {
        Self { record: false, ..Self::new(mode) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Running-statistics updates emitted by training-mode batch norms.
    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Drops the values of every node except `keep` and parameter leaves.
    /// Has no effect on recording graphs, which need all values for backward.
    pub fn retain_only(&mut self, keep: &[Var]) {
        if self.record {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Param) || keep.contains(&Var(i)) {
                continue;
            }
            node.value = Tensor::zeros(&[0]);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// The named parameter as a leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let needs_grad = self.record && p.trainable;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::Shape("transpose needs a 2D tensor".into()));
        }
        let value = self.value(a).transposed();
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Elementwise sum with broadcasting over size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let value = self.value(a).map(f64::ln);
        Ok(self.push(value, Op::Log(a), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let value = softmax_along(self.value(a), axis);
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    /// Stable `log Σ exp` along `axis`, keeping the axis with size 1.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| x.data()[(o * len + l) * inner + i];
                let max = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                data.push(max + (0..len).map(|l| (at(l) - max).exp()).sum::<f64>().ln());
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::LogSumExp(a, axis), &[a]))
    }

    /// Maximum along `axis`; the axis is removed.
    pub fn max_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = split_axis(x.shape(), axis);
        if len == 0 {
            return Err(Error::Shape("max_pool over an empty axis".into()));
        }
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let at = (o * len + l) * inner + i;
                    if x.data()[at] > x.data()[best] {
                        best = at;
                    }
                }
                data.push(x.data()[best]);
                argmax.push(best);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MaxPool { input: a, argmax }, &[a]))
    }

    /// Selects slices along the first axis.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rows = x.shape().first().copied().unwrap_or(0);
        let width = x.len() / rows.max(1);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { input: a, indices: indices.to_vec() }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        self.check_axis(*first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d]) {
                return Err(Error::Shape(format!("concat of {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let x = self.value(v);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = self.value(a);
        let (outer, full, inner) = split_axis(x.shape(), axis);
        if start + len > full {
            return Err(Error::Shape(format!("slice {start}..{} of axis with {full}", start + len)));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Per-channel normalization of an `M×C` input over its rows.
    ///
    /// Training mode uses batch statistics and queues a running-stat update
    /// under `prefix`; eval mode reads `{prefix}.running_mean` and
    /// `{prefix}.running_var` from `store`.
    pub fn batch_norm(&mut self, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(store, &format!("{prefix}.gamma"))?;
        let beta = self.param(store, &format!("{prefix}.beta"))?;
        let input = self.value(x);
        if input.rank() != 2 {
            return Err(Error::Shape(format!("batch_norm needs M×C input, got {:?}", input.shape())));
        }
        let (m, c) = (input.rows(), input.cols());
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return Err(Error::Shape(format!("batch_norm parameters of {prefix} do not match {c} channels")));
        }
        let (mean, var) = match self.mode {
            Mode::Train => {
                if m == 0 {
                    return Err(Error::Shape("batch_norm over zero rows".into()));
                }
                let mut mean = vec![0.0; c];
                for i in 0..m {
                    for (acc, v) in mean.iter_mut().zip(input.row(i)) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; c];
                for i in 0..m {
                    for ((acc, v), mu) in var.iter_mut().zip(input.row(i)).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean, var)
            }
            Mode::Eval => (
                store.get(&format!("{prefix}.running_mean"))?.value.data().to_vec(),
                store.get(&format!("{prefix}.running_var"))?.value.data().to_vec(),
            ),
        };
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("running statistics of {prefix} do not match {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = input.clone();
        for i in 0..m {
            for j in 0..c {
                let v = &mut x_hat.data_mut()[i * c + j];
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = x_hat.clone();
        for i in 0..m {
            for j in 0..c {
                let v = &mut out.data_mut()[i * c + j];
                *v = *v * g[j] + b[j];
            }
        }
        let op = match self.mode {
            Mode::Train => {
                let unbiased = if m > 1 {
                    var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
                } else {
                    var.clone()
                };
                self.bn_updates.push(BnUpdate { prefix: prefix.to_string(), mean, var: unbiased });
                Op::BatchNormTrain { input: x, gamma, beta, x_hat, inv_std }
            }
            Mode::Eval => Op::BatchNormEval { input: x, gamma, beta, inv_std, x_hat },
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    /// Batch norm over the rows of all `xs` together, returned split back
    /// into the original blocks. One statistics update is queued.
    pub fn batch_norm_group(&mut self, store: &ParamStore, xs: &[Var], prefix: &str) -> Result<Vec<Var>> {
        if xs.len() == 1 {
            return Ok(vec![self.batch_norm(store, xs[0], prefix)?]);
        }
        let rows: Vec<usize> = xs.iter().map(|&x| self.shape(x).first().copied().unwrap_or(0)).collect();
        let joined = self.concat(xs, 0)?;
        let normed = self.batch_norm(store, joined, prefix)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(xs.len());
        for r in rows {
            out.push(self.slice(normed, 0, start, r)?);
            start += r;
        }
        Ok(out)
    }

    /// Fused `softmax(scale · q·kᵀ) · v` over rows; the attention matrix is
    /// recomputed during backward instead of being stored.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2 || qv.cols() != kv.cols() || kv.rows() != vv.rows() {
            return Err(Error::Shape(format!(
                "attention with q {:?}, k {:?}, v {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if kv.rows() == 0 {
            return Err(Error::Size("attention over an empty key set".into()));
        }
        let a = attention_weights(qv, kv, scale);
        let (m, n, dv) = (qv.rows(), kv.rows(), vv.cols());
        let out = Tensor::new(vec![m, dv], matmul_raw(a.data(), vv.data(), m, n, dv))?;
        Ok(self.push(out, Op::Attention { q, k, v, scale }, &[q, k, v]))
    }

    /// Appends a slack row and column filled with the scalar `alpha`.
    pub fn pad_slack(&mut self, s: Var, alpha: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.rank() != 2 || self.value(alpha).len() != 1 {
            return Err(Error::Shape("pad_slack needs an M×N matrix and a scalar".into()));
        }
        let (m, n) = (sv.rows(), sv.cols());
        let a = self.value(alpha).item();
        let mut data = Vec::with_capacity((m + 1) * (n + 1));
        for i in 0..m {
            data.extend_from_slice(sv.row(i));
            data.push(a);
        }
        data.extend(std::iter::repeat_n(a, n + 1));
        let value = Tensor::new(vec![m + 1, n + 1], data)?;
        Ok(self.push(value, Op::PadSlack(s, alpha), &[s, alpha]))
    }

    /// Log-domain Sinkhorn normalization of `z` towards row log-marginals
    /// `log_mu` and column log-marginals `log_nu`. Returns `log P`, where the
    /// last step is a column update.
    pub fn sinkhorn(&mut self, z: Var, log_mu: &[f64], log_nu: &[f64], iterations: usize) -> Result<Var> {
        let zv = self.value(z);
        if zv.rank() != 2 || zv.rows() != log_mu.len() || zv.cols() != log_nu.len() {
            return Err(Error::Shape(format!(
                "sinkhorn on {:?} with marginals {} and {}",
                zv.shape(),
                log_mu.len(),
                log_nu.len()
            )));
        }
        if iterations == 0 {
            return Err(Error::Config("sinkhorn needs at least one iteration".into()));
        }
        let (r, c) = (zv.rows(), zv.cols());
        let mut v = vec![0.0; c];
        let mut us = Vec::with_capacity(iterations);
        let mut vs = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let u: Vec<f64> = lse_rows(zv.data(), r, c, &v).iter().zip(log_mu).map(|(l, a)| a - l).collect();
            v = lse_cols(zv.data(), r, c, &u).iter().zip(log_nu).map(|(l, b)| b - l).collect();
            us.push(u);
            vs.push(v.clone());
        }
        let u = us.last().expect("at least one iteration");
        let mut out = zv.clone();
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[i * c + j] += u[i] + v[j];
            }
        }
        if !out.is_finite() {
            return Err(Error::Numeric("sinkhorn produced non-finite values".into()));
        }
        let op = Op::Sinkhorn { input: z, us, vs };
        Ok(self.push(out, op, &[z]))
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(Error::Shape(format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    /// Reverse-mode gradients of the scalar `loss` for every trainable
    /// parameter used in this graph. Unused parameters are absent.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::State("backward on a graph that was not recorded".into()));
        }
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::State("loss does not belong to this graph".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", node.value.shape())));
        }
        if !node.needs_grad {
            return Err(Error::State("loss does not depend on any trainable parameter".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(node.value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if let Op::Param = self.nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            for (input, gi) in self.input_grads(id, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(gi),
                }
            }
        }
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            if v.0 <= loss.0 {
                if let Some(g) = grads[v.0].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    fn input_grads(&self, id: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let ga = Tensor::new(vec![m, k], matmul_nt_raw(g.data(), bv.data(), m, n, k))?;
                let gb = Tensor::new(vec![k, n], matmul_tn_raw(av.data(), g.data(), m, k, n))?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(a) => vec![(*a, g.transposed())],
            Op::Add(a, b) => vec![(*a, reduce_to(g, val(*a).shape())), (*b, reduce_to(g, val(*b).shape()))],
            Op::Sub(a, b) => {
                let neg = g.map(|x| -x);
                vec![(*a, reduce_to(g, val(*a).shape())), (*b, reduce_to(&neg, val(*b).shape()))]
            }
            Op::Mul(a, b) => {
                let ga = broadcast_binary(g, val(*b), |x, y| x * y)?;
                let gb = broadcast_binary(g, val(*a), |x, y| x * y)?;
                vec![(*a, reduce_to(&ga, val(*a).shape())), (*b, reduce_to(&gb, val(*b).shape()))]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| if xi > 0.0 { gi } else { gi * slope }).collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Log(a) => {
                let x = val(*a);
                vec![(*a, broadcast_binary(g, x, |gi, xi| gi / xi)?)]
            }
            Op::Exp(a) => vec![(*a, broadcast_binary(g, &node.value, |gi, yi| gi * yi)?)],
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                vec![(*a, broadcast_binary(g, x, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 })?)]
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let mut gx = Tensor::zeros(y.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g.data()[at(l)] * y.data()[at(l)]).sum();
                        for l in 0..len {
                            gx.data_mut()[at(l)] = y.data()[at(l)] * (g.data()[at(l)] - dot);
                        }
                    }
                }
                vec![(*a, gx)]
            }
            Op::LogSumExp(a, axis) => {
                let x = val(*a);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut gx = Tensor::zeros(x.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let lse = node.value.data()[o * inner + i];
                        let gi = g.data()[o * inner + i];
                        for l in 0..len {
                            let at = (o * len + l) * inner + i;
                            gx.data_mut()[at] = gi * (x.data()[at] - lse).exp();
                        }
                    }
                }
                vec![(*a, gx)]
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = Tensor::zeros(val(*input).shape());
                for (gi, &at) in g.data().iter().zip(argmax) {
                    gx.data_mut()[at] += gi;
                }
                vec![(*input, gx)]
            }
            Op::Gather { input, indices } => {
                let x = val(*input);
                let width = x.len() / x.rows().max(1);
                let mut gx = Tensor::zeros(x.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (dst, src) in gx.data_mut()[i * width..(i + 1) * width].iter_mut().zip(&g.data()[r * width..(r + 1) * width]) {
                        *dst += src;
                    }
                }
                vec![(*input, gx)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let shape = val(v).shape().to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[from..from + len * inner]);
                    }
                    offset += len;
                    out.push((v, Tensor::new(shape, data)?));
                }
                out
            }
            Op::Slice { input, axis, start } => {
                let x = val(*input);
                let (outer, full, inner) = split_axis(x.shape(), *axis);
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(x.shape());
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    gx.data_mut()[to..to + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, gx)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape())?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::BatchNormTrain { input, gamma, beta, x_hat, inv_std } => {
                let (m, c) = (x_hat.rows(), x_hat.cols());
                let gam = val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..m {
                    for j in 0..c {
                        let gi = g.data()[i * c + j];
                        sum_g[j] += gi;
                        sum_gx[j] += gi * x_hat.data()[i * c + j];
                    }
                }
                let mut gx = Tensor::zeros(&[m, c]);
                let mf = m as f64;
                for i in 0..m {
                    for j in 0..c {
                        let gi = g.data()[i * c + j];
                        let xh = x_hat.data()[i * c + j];
                        gx.data_mut()[i * c + j] = gam[j] * inv_std[j] * (gi - sum_g[j] / mf - xh * sum_gx[j] / mf);
                    }
                }
                vec![
                    (*input, gx),
                    (*gamma, Tensor::new(vec![1, c], sum_gx)?),
                    (*beta, Tensor::new(vec![1, c], sum_g)?),
                ]
            }
            Op::BatchNormEval { input, gamma, beta, inv_std, x_hat } => {
                let (m, c) = (x_hat.rows(), x_hat.cols());
                let gam = val(*gamma).data();
                let mut gx = Tensor::zeros(&[m, c]);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..m {
                    for j in 0..c {
                        let gi = g.data()[i * c + j];
                        gx.data_mut()[i * c + j] = gi * gam[j] * inv_std[j];
                        sum_g[j] += gi;
                        sum_gx[j] += gi * x_hat.data()[i * c + j];
                    }
                }
                vec![
                    (*input, gx),
                    (*gamma, Tensor::new(vec![1, c], sum_gx)?),
                    (*beta, Tensor::new(vec![1, c], sum_g)?),
                ]
            }
            Op::Attention { q, k, v, scale } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (m, d, n, dv) = (qv.rows(), qv.cols(), kv.rows(), vv.cols());
                let a = attention_weights(qv, kv, *scale);
                // dV = Aᵀ·G, dA = G·Vᵀ, dLogits = A ⊙ (dA − rowsum(dA ⊙ A)).
                let gv = matmul_tn_raw(a.data(), g.data(), m, n, dv);
                let mut da = matmul_nt_raw(g.data(), vv.data(), m, dv, n);
                for i in 0..m {
                    let ar = &a.data()[i * n..(i + 1) * n];
                    let dr = &mut da[i * n..(i + 1) * n];
                    let dot: f64 = ar.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                    for (dx, &ax) in dr.iter_mut().zip(ar) {
                        *dx = ax * (*dx - dot) * scale;
                    }
                }
                let gq = matmul_raw(&da, kv.data(), m, n, d);
                let gk = matmul_tn_raw(&da, qv.data(), m, n, d);
                vec![
                    (*q, Tensor::new(vec![m, d], gq)?),
                    (*k, Tensor::new(vec![n, d], gk)?),
                    (*v, Tensor::new(vec![n, dv], gv)?),
                ]
            }
            Op::PadSlack(s, alpha) => {
                let (r, c) = (g.rows(), g.cols());
                let mut gs = Vec::with_capacity((r - 1) * (c - 1));
                let mut ga = 0.0;
                for i in 0..r {
                    for j in 0..c {
                        let gi = g.data()[i * c + j];
                        if i + 1 < r && j + 1 < c {
                            gs.push(gi);
                        } else {
                            ga += gi;
                        }
                    }
                }
                vec![
                    (*s, Tensor::new(vec![r - 1, c - 1], gs)?),
                    (*alpha, Tensor::new(val(*alpha).shape().to_vec(), vec![ga])?),
                ]
            }
            Op::Sinkhorn { input, us, vs } => {
                let z = val(*input);
                let (r, c) = (z.rows(), z.cols());
                let mut gz = g.clone();
                let mut gu = vec![0.0; r];
                let mut gv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gu[i] += g.data()[i * c + j];
                        gv[j] += g.data()[i * c + j];
                    }
                }
                let zero = vec![0.0; c];
                for t in (0..us.len()).rev() {
                    // v_t = ν − LSE_i(z + u_t): column softmax B_t.
                    let u = &us[t];
                    let lse_c = lse_cols(z.data(), r, c, u);
                    let mut gu_t = gu.clone();
                    for i in 0..r {
                        for j in 0..c {
                            let b = (z.data()[i * c + j] + u[i] - lse_c[j]).exp();
                            gz.data_mut()[i * c + j] -= b * gv[j];
                            gu_t[i] -= b * gv[j];
                        }
                    }
                    // u_t = μ − LSE_j(z + v_{t−1}): row softmax A_t.
                    let v_prev = if t == 0 { &zero } else { &vs[t - 1] };
                    let lse_r = lse_rows(z.data(), r, c, v_prev);
                    let mut gv_prev = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            let a = (z.data()[i * c + j] + v_prev[j] - lse_r[i]).exp();
                            gz.data_mut()[i * c + j] -= a * gu_t[i];
                            gv_prev[j] -= a * gu_t[i];
                        }
                    }
                    gv = gv_prev;
                    gu = vec![0.0; r];
                }
                vec![(*input, gz)]
            }
        };
        Ok(out)
    }
}

/// Row-wise `softmax(scale · q·kᵀ)`.
pub(crate) fn attention_weights(q: &Tensor, k: &Tensor, scale: f64) -> Tensor {
    let (m, d, n) = (q.rows(), q.cols(), k.rows());
    let logits = matmul_nt_raw(q.data(), k.data(), m, d, n).into_iter().map(|x| x * scale).collect();
    let logits = Tensor::new(vec![m, n], logits).expect("shape is consistent");
    softmax_along(&logits, 1)
}
