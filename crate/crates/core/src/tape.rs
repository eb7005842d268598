//! Record-and-replay reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Nodes
//! only reference earlier nodes, so the tape is topologically ordered by
//! construction and [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to vector norms inside cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    GatherCol(Var, usize),
    CosineMatrix(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.value(x).rank() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.derived(out, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x + y);
        Ok(self.derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x - y);
        Ok(self.derived(out, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y);
        Ok(self.derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.derived(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.derived(out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.derived(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.derived(out, Op::Log(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.derived(out, Op::Relu(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.derived(out, Op::Clamp(a, lo, hi), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis`. Positions where `mask` is `false` get zero
    /// weight and are excluded from the normalizer. A slice with every
    /// position masked yields zeros.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask has {} entries for {:?}", m.len(), t.shape()),
                ));
            }
        }
        let (outer, n, inner) = t.axis_split(axis);
        let src = t.data();
        let mut out = vec![0.0; t.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let valid = |k: usize| mask.is_none_or(|m| m[idx(k)]);
                let max = (0..n)
                    .filter(|&k| valid(k))
                    .map(|k| src[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for k in (0..n).filter(|&k| valid(k)) {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.derived(
            out,
            Op::Softmax { x, axis },
            &[x],
        ))
    }

    /// Sum of every entry, as a one-element tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.derived(out, Op::SumAll(a), &[a])
    }

    /// Sum along `axis`, removing it. Reducing a vector gives a one-element tensor.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let t = self.value(a);
        let (outer, n, inner) = t.axis_split(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * n + k) * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.derived(out, Op::SumAxis(a, axis), &[a]))
    }

    /// Mean along `axis`, removing it. Accumulated incrementally, so slices
    /// of identical values return that value exactly.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let t = self.value(a);
        let (outer, n, inner) = t.axis_split(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = t.data()[o * n * inner + i];
                for k in 1..n {
                    m += (t.data()[(o * n + k) * inner + i] - m) / (k + 1) as f64;
                }
                out[o * inner + i] = m;
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.derived(out, Op::MeanAxis(a, axis), &[a]))
    }

    /// Global average pooling: mean over the rows of a matrix.
    pub fn gap(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::shape("gap", "expects a matrix"));
        }
        self.mean_axis(a, 0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
        }
        let (outer, _, inner) = self.value(first).axis_split(axis);
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out)?;
        Ok(self.derived(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Concatenation along the trailing axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let axis = self.value(first).rank() - 1;
        self.concat(parts, axis)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    /// Repeats a length-`d` vector as `n` identical rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(Error::shape("broadcast_rows", "expects a vector"));
        }
        let d = t.len();
        let out = Tensor::matrix(n, d, t.data().repeat(n))?;
        Ok(self.derived(out, Op::BroadcastRows(v), &[v]))
    }

    /// Repeats a length-`m` vector as `n` identical columns.
    pub fn broadcast_cols(&mut self, v: Var, n: usize) -> Result<Var> {
        let t = self.value(v);
        if t.rank() != 1 {
            return Err(Error::shape("broadcast_cols", "expects a vector"));
        }
        let m = t.len();
        let data = t
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, n))
            .collect();
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.derived(out, Op::BroadcastCols(v), &[v]))
    }

    /// Column `col` of a matrix, as a vector.
    pub fn gather_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || col >= t.cols() {
            return Err(Error::shape(
                "gather_col",
                format!("column {col} of {:?}", t.shape()),
            ));
        }
        let data = (0..t.rows()).map(|i| t.at(i, col)).collect();
        let out = Tensor::vector(data)?;
        Ok(self.derived(out, Op::GatherCol(a, col), &[a]))
    }

    /// Pairwise cosine similarity between the rows of `x` (m×d) and `y` (n×d).
    /// Norms are floored at [`NORM_EPS`]; results are clamped to [-1, 1]
    /// against rounding.
    pub fn cosine_matrix(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.rank() != 2 || ty.rank() != 2 || tx.cols() != ty.cols() {
            return Err(Error::shape(
                "cosine",
                format!("{:?} vs {:?}", tx.shape(), ty.shape()),
            ));
        }
        let (m, n) = (tx.rows(), ty.rows());
        let nx: Vec<f64> = (0..m).map(|i| guarded_norm(tx.row(i))).collect();
        let ny: Vec<f64> = (0..n).map(|j| guarded_norm(ty.row(j))).collect();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (dot(tx.row(i), ty.row(j)) / (nx[i] * ny[j])).clamp(-1.0, 1.0);
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.derived(out, Op::CosineMatrix(x, y), &[x, y]))
    }

    /// Cosine similarity of each row of `x` (m×d) against the vector `y` (d).
    pub fn cosine_sim(&mut self, x: Var, y: Var) -> Result<Var> {
        let d = self.value(y).len();
        let y2 = self.reshape(y, &[1, d])?;
        let c = self.cosine_matrix(x, y2)?;
        let m = self.shape(c)[0];
        self.reshape(c, &[m])
    }

    /// Affine map `x W + b` applied to each row of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                let rows = self.shape(y)[0];
                let bb = self.broadcast_rows(b, rows)?;
                self.add(y, bb)
            }
        }
    }

    /// Kernel-size-1 convolution over a `length × channels_in` sequence, which
    /// is a per-position affine map `channels_in → channels_out`.
    pub fn conv1d_pointwise(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        self.linear(x, kernel, bias)
    }

    /// Runs the reverse sweep from a one-element `loss` node. Gradients of
    /// previous sweeps are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    acc(*a, g.matmul(&tb.transpose()?)?);
                }
                if self.requires_grad(*b) {
                    acc(*b, ta.transpose()?.matmul(g)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_with(self.value(*b), |gi, bi| gi * bi));
                acc(*b, g.zip_with(self.value(*a), |gi, ai| gi * ai));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g.zip_with(y, |gi, yi| gi * yi)),
            Op::Log(a) => acc(*a, g.zip_with(self.value(*a), |gi, xi| gi / xi)),
            Op::Sigmoid(a) => acc(*a, g.zip_with(y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Relu(a) => acc(
                *a,
                g.zip_with(self.value(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
            ),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_with(self.value(*a), |gi, xi| {
                    if xi >= *lo && xi <= *hi {
                        gi
                    } else {
                        0.0
                    }
                }),
            ),
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = y.axis_split(*axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dotp: f64 = (0..n).map(|k| y.data()[idx(k)] * g.data()[idx(k)]).sum();
                        for k in 0..n {
                            dx[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dotp);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::SumAll(a) => acc(*a, Tensor::filled(self.shape(*a), g.data()[0])),
            Op::SumAxis(a, axis) => {
                let src = self.value(*a);
                let (outer, n, inner) = src.axis_split(*axis);
                let mut dx = vec![0.0; src.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                acc(*a, Tensor::new(src.shape().to_vec(), dx)?);
            }
            Op::MeanAxis(a, axis) => {
                let src = self.value(*a);
                let (outer, n, inner) = src.axis_split(*axis);
                let mut dx = vec![0.0; src.len()];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            dx[(o * n + k) * inner + i] = g.data()[o * inner + i] / n as f64;
                        }
                    }
                }
                acc(*a, Tensor::new(src.shape().to_vec(), dx)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = y.axis_split(*axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    let mut dx = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        dx.extend_from_slice(&g.data()[start..start + n * inner]);
                    }
                    acc(*p, Tensor::new(self.shape(*p).to_vec(), dx)?);
                    offset += n;
                }
            }
            Op::Reshape(a) => acc(*a, g.reshape(self.shape(*a))?),
            Op::BroadcastRows(v) => {
                let d = self.value(*v).len();
                let mut dx = vec![0.0; d];
                for row in g.data().chunks(d) {
                    for (o, r) in dx.iter_mut().zip(row) {
                        *o += r;
                    }
                }
                acc(*v, Tensor::vector(dx)?);
            }
            Op::BroadcastCols(v) => {
                let n = g.cols();
                let dx = g.data().chunks(n).map(|r| r.iter().sum()).collect();
                acc(*v, Tensor::vector(dx)?);
            }
            Op::GatherCol(a, col) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.shape());
                let n = src.cols();
                for i in 0..src.rows() {
                    dx.data_mut()[i * n + col] = g.data()[i];
                }
                acc(*a, dx);
            }
            Op::CosineMatrix(x, y_var) => {
                let (tx, ty) = (self.value(*x), self.value(*y_var));
                let (m, n, d) = (tx.rows(), ty.rows(), tx.cols());
                let nx: Vec<f64> = (0..m).map(|i| guarded_norm(tx.row(i))).collect();
                let ny: Vec<f64> = (0..n).map(|j| guarded_norm(ty.row(j))).collect();
                let raw_x: Vec<bool> = (0..m).map(|i| norm(tx.row(i)) > NORM_EPS).collect();
                let raw_y: Vec<bool> = (0..n).map(|j| norm(ty.row(j)) > NORM_EPS).collect();
                let mut dx = vec![0.0; m * d];
                let mut dy = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let c = y.data()[i * n + j];
                        let denom = nx[i] * ny[j];
                        for t in 0..d {
                            let xv = tx.data()[i * d + t];
                            let yv = ty.data()[j * d + t];
                            let mut gx = yv / denom;
                            if raw_x[i] {
                                gx -= c * xv / (nx[i] * nx[i]);
                            }
                            let mut gy = xv / denom;
                            if raw_y[j] {
                                gy -= c * yv / (ny[j] * ny[j]);
                            }
                            dx[i * d + t] += gij * gx;
                            dy[j * d + t] += gij * gy;
                        }
                    }
                }
                acc(*x, Tensor::matrix(m, d, dx)?);
                acc(*y_var, Tensor::matrix(n, d, dy)?);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn guarded_norm(a: &[f64]) -> f64 {
    norm(a).max(NORM_EPS)
}
