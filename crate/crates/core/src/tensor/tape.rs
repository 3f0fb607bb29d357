use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a temporal shift reads when its source frame falls outside the
/// clip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Shifted-in values are zero.
    #[default]
    Zero,
    /// The current frame's own values are kept.
    Clamp,
    /// Frames wrap around (circular). Breaks temporal locality at the
    /// clip ends.
    Wrap,
}

impl Boundary {
    /// Source frame for output frame `t` reading from `t + offset`.
    pub fn source(self, t: usize, offset: isize, frames: usize) -> Option<usize> {
        let s = t as isize + offset;
        if (0..frames as isize).contains(&s) {
            return Some(s as usize);
        }
        match self {
            Boundary::Zero => None,
            Boundary::Clamp => Some(t),
            Boundary::Wrap => Some(s.rem_euclid(frames as isize) as usize),
        }
    }
}

/// One rectangular region of a `[T, R, C]` tensor whose output frame `t`
/// is read from frame `t + offset`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftBlock {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub offset: isize,
}

/// A set of disjoint [`ShiftBlock`]s over a `[T, R, C]` tensor. Elements
/// outside every block pass through unchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftPlan {
    blocks: Vec<ShiftBlock>,
    boundary: Boundary,
}

impl ShiftPlan {
    pub fn new(blocks: Vec<ShiftBlock>, boundary: Boundary) -> Result<Self> {
        let blocks: Vec<_> = blocks
            .into_iter()
            .filter(|b| !b.rows.is_empty() && !b.cols.is_empty())
            .collect();
        for (i, a) in blocks.iter().enumerate() {
            for b in &blocks[i + 1..] {
                let rows = a.rows.start < b.rows.end && b.rows.start < a.rows.end;
                let cols = a.cols.start < b.cols.end && b.cols.start < a.cols.end;
                if rows && cols {
                    return Err(Error::config(format!(
                        "overlapping shift blocks {a:?} and {b:?}"
                    )));
                }
            }
        }
        Ok(ShiftPlan { blocks, boundary })
    }

    pub fn blocks(&self) -> &[ShiftBlock] {
        &self.blocks
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn is_identity(&self) -> bool {
        self.blocks.iter().all(|b| b.offset == 0)
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 {
            return Err(Error::Dimension {
                op: "shift",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        for b in &self.blocks {
            if b.rows.end > shape[1] || b.cols.end > shape[2] {
                return Err(Error::Index {
                    op: "shift",
                    detail: format!("block {b:?} exceeds {shape:?}"),
                });
            }
        }
        Ok(())
    }

    /// Applies the shift to a `[T, R, C]` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x.shape())?;
        let (t_n, r_n, c_n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let src = x.data();
        let mut out = src.to_vec();
        for b in &self.blocks {
            for t in 0..t_n {
                let from = self.boundary.source(t, b.offset, t_n);
                for r in b.rows.clone() {
                    let dst = (t * r_n + r) * c_n;
                    let o = &mut out[dst + b.cols.start..dst + b.cols.end];
                    match from {
                        Some(s) => {
                            let so = (s * r_n + r) * c_n;
                            o.copy_from_slice(&src[so + b.cols.start..so + b.cols.end]);
                        }
                        None => o.fill(0.0),
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    /// Transpose of [`ShiftPlan::apply`]: routes each output gradient back
    /// to the element it was copied from.
    pub(crate) fn adjoint(&self, g: &Tensor) -> Tensor {
        let (t_n, r_n, c_n) = (g.shape()[0], g.shape()[1], g.shape()[2]);
        let gd = g.data();
        let mut out = gd.to_vec();
        for b in &self.blocks {
            for t in 0..t_n {
                for r in b.rows.clone() {
                    let o = (t * r_n + r) * c_n;
                    out[o + b.cols.start..o + b.cols.end].fill(0.0);
                }
            }
        }
        for b in &self.blocks {
            for t in 0..t_n {
                let Some(s) = self.boundary.source(t, b.offset, t_n) else {
                    continue;
                };
                for r in b.rows.clone() {
                    let go = (t * r_n + r) * c_n;
                    let so = (s * r_n + r) * c_n;
                    for c in b.cols.clone() {
                        out[so + c] += gd[go + c];
                    }
                }
            }
        }
        Tensor::new(g.shape().to_vec(), out).expect("adjoint preserves shape")
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    TileLeading(Var),
    Sum(Var),
    MeanAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        b_transposed: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Shift(Var, Arc<ShiftPlan>),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An append-only record of tensor operations supporting reverse-mode
/// differentiation.
///
/// Every recorded node's inputs were recorded before it, so reverse index
/// order is a valid topological order for [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients of one scalar with respect to every tracked tape value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` is untracked or unreachable
    /// from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Standard normal CDF and density, for exact GELU.
fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
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

    /// Multiply-adds performed by every matmul recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
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

    /// Records a tensor that gradients flow to.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a tensor excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.derived(t, Op::Scale(a, s), &[a])
    }

    /// `a + b` where `b`'s shape equals the trailing dims of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !broadcast_ok(x.shape(), y.shape()) {
            return Err(Error::Dimension {
                op: "add_broadcast",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let inner = y.numel();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_exact_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(y.data()) {
                *o += v;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.derived(t, Op::AddBroadcast(a, b), &[a, b]))
    }

    /// Repeats `a` along a new leading axis of extent `n`.
    pub fn tile_leading(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Contract("tile_leading with n = 0".into()));
        }
        let x = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(x.shape());
        let data = x.data().repeat(n);
        let t = Tensor::new(shape, data)?;
        Ok(self.derived(t, Op::TileLeading(a), &[a]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::Index {
                op: "mean_over_axis",
                detail: format!("axis {axis} for shape {:?}", x.shape()),
            });
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, data)?;
        Ok(self.derived(t, Op::MeanAxis(a, axis), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.derived(t, Op::Reshape(a), &[a]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank()
            || !perm
                .iter()
                .all(|&p| p < x.rank() && !std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Index {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of rank {}", x.rank()),
            });
        }
        let (shape, data) = permute_data(x.shape(), x.data(), perm);
        let t = Tensor::new(shape, data)?;
        Ok(self.derived(t, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Index {
                op: "concat",
                detail: format!("axis {axis} for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let chunk = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.derived(t, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(Error::Index {
                op: "slice",
                detail: format!("{start}..{end} on axis {axis} of {:?}", x.shape()),
            });
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = end - start;
        let t = Tensor::new(shape, data)?;
        Ok(self.derived(t, Op::Slice { x: a, axis, start }, &[a]))
    }

    /// Rank-2 matrix product `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(x.data(), y.data(), &mut out, m, k, n);
        self.macs += (m * k * n) as u64;
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.derived(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Affine map over the last axis: `x · w + b` for `x` of shape
    /// `[..., d_in]` and `w` of shape `[d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if shape.is_empty() || ws.len() != 2 || shape[shape.len() - 1] != ws[0] {
            return Err(Error::Dimension {
                op: "linear",
                lhs: shape,
                rhs: ws,
            });
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, ws[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_broadcast(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// Batched product over a leading axis: `[B×m×k] · [B×k×n]`, or
    /// `[B×m×k] · [B×n×k]ᵀ` when `b_transposed`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let bad = || Error::Dimension {
            op: "batch_matmul",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        };
        if x.rank() != 3 || y.rank() != 3 || x.shape()[0] != y.shape()[0] {
            return Err(bad());
        }
        let (batch, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (yk, n) = if b_transposed {
            (y.shape()[2], y.shape()[1])
        } else {
            (y.shape()[1], y.shape()[2])
        };
        if yk != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let xa = &x.data()[bi * m * k..(bi + 1) * m * k];
            let yb = &y.data()[bi * k * n..(bi + 1) * k * n];
            let o = &mut out[bi * m * n..(bi + 1) * m * n];
            if b_transposed {
                gemm_nt(xa, yb, o, m, k, n);
            } else {
                gemm_nn(xa, yb, o, m, k, n);
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let t = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.derived(t, Op::BatchMatMul { a, b, b_transposed }, &[a, b]))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(Error::Dimension {
                op: "softmax_lastdim",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let t = softmax_rows(x)?;
        Ok(self.derived(t, Op::Softmax(a), &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (x, g, b) = (self.value(a), self.value(gamma), self.value(beta));
        let d = *x.shape().last().unwrap_or(&0);
        if x.rank() == 0 || g.shape() != [d] || b.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = x.numel() / d;
        let mut out = vec![0.0; x.numel()];
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.derived(
            t,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[a, gamma, beta],
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * phi_cdf(x));
        self.derived(t, Op::Gelu(a), &[a])
    }

    /// Temporal shift of a `[T, R, C]` tensor.
    pub fn shift(&mut self, a: Var, plan: Arc<ShiftPlan>) -> Result<Var> {
        let t = plan.apply(self.value(a))?;
        Ok(self.derived(t, Op::Shift(a, plan), &[a]))
    }

    /// Cross-entropy of softmax(`logits`) against class `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 1 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        if label >= x.numel() {
            return Err(Error::Index {
                op: "cross_entropy",
                detail: format!("label {label} for {} classes", x.numel()),
            });
        }
        let probs = softmax_rows(x)?.into_data();
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x.data()[label];
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.rank() > 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "loss does not depend on any tracked tensor".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape());
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| self.value(v);
        let with_shape =
            |v: Var, data: Vec<f64>| Tensor::new(val(v).shape().to_vec(), data).unwrap();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| x * y)
                    .collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, y)| x * y)
                    .collect();
                self.accumulate(grads, *a, with_shape(*a, ga));
                self.accumulate(grads, *b, with_shape(*b, gb));
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddBroadcast(a, b) => {
                let inner = val(*b).numel();
                let mut gb = vec![0.0; inner];
                for chunk in g.data().chunks_exact(inner) {
                    for (o, &v) in gb.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *b, with_shape(*b, gb));
                self.accumulate(grads, *a, g);
            }
            Op::TileLeading(a) => {
                let inner = val(*a).numel();
                let mut ga = vec![0.0; inner];
                for chunk in g.data().chunks_exact(inner) {
                    for (o, &v) in ga.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, with_shape(*a, ga));
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
                let inv = 1.0 / len as f64;
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, with_shape(*a, ga));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, with_shape(*a, g.into_data())),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, data) = permute_data(g.shape(), g.data(), &inv);
                self.accumulate(grads, *a, with_shape(*a, data));
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let mut pieces: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(val(*p).numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let chunk = val(*p).shape()[*axis] * inner;
                        pieces[pi].extend_from_slice(&g.data()[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (p, data) in parts.iter().zip(pieces) {
                    self.accumulate(grads, *p, with_shape(*p, data));
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let width = g.shape()[*axis];
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    gx[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *x, with_shape(*x, gx));
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), y.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, with_shape(*a, ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(x.data(), g.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, with_shape(*b, gb));
                }
            }
            Op::BatchMatMul { a, b, b_transposed } => {
                let (x, y) = (val(*a), val(*b));
                let (batch, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let n = g.shape()[2];
                let (need_a, need_b) = (self.requires_grad(*a), self.requires_grad(*b));
                let mut ga = vec![0.0; if need_a { batch * m * k } else { 0 }];
                let mut gb = vec![0.0; if need_b { batch * k * n } else { 0 }];
                for bi in 0..batch {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let xs = &x.data()[bi * m * k..(bi + 1) * m * k];
                    let ys = &y.data()[bi * k * n..(bi + 1) * k * n];
                    if need_a {
                        let o = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *b_transposed {
                            gemm_nn(gs, ys, o, m, n, k);
                        } else {
                            gemm_nt(gs, ys, o, m, n, k);
                        }
                    }
                    if need_b {
                        let o = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *b_transposed {
                            gemm_tn(gs, xs, o, n, m, k);
                        } else {
                            gemm_tn(xs, gs, o, k, m, n);
                        }
                    }
                }
                if need_a {
                    self.accumulate(grads, *a, with_shape(*a, ga));
                }
                if need_b {
                    self.accumulate(grads, *b, with_shape(*b, gb));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut ga = vec![0.0; y.numel()];
                for ((gr, yr), out) in g
                    .data()
                    .chunks_exact(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(ga.chunks_exact_mut(d))
                {
                    let s: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, with_shape(*a, ga));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma).data();
                let d = gm.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        gx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, with_shape(*x, gx));
                self.accumulate(grads, *gamma, with_shape(*gamma, gg));
                self.accumulate(grads, *beta, with_shape(*beta, gbeta));
            }
            Op::Gelu(a) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(gv, &x)| gv * (phi_cdf(x) + x * phi_pdf(x)))
                    .collect();
                self.accumulate(grads, *a, with_shape(*a, ga));
            }
            Op::Shift(a, plan) => self.accumulate(grads, *a, plan.adjoint(&g)),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let s = g.item();
                let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                gl[*label] -= s;
                self.accumulate(grads, *logits, with_shape(*logits, gl));
            }
        }
    }
}

fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().expect("rank >= 1");
    let mut out = vec![0.0; x.numel()];
    for (row, o) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "softmax over non-finite row {row:?}"
            )));
        }
        let mut s = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            s += *ov;
        }
        let inv = 1.0 / s;
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(x.shape().to_vec(), out)
}
