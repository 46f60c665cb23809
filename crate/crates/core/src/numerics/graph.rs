//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] walks it in reverse. Parameters enter the tape through
//! [`Graph::param`]; each parameter maps to a single node per graph so
//! gradients accumulate in one place.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, matmul_ta, matmul_tb, transpose, Tensor};
use crate::error::{invalid, shape_err, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    MatMulTransB(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulRows(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    LogClamped(NodeId, f64),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Clamp(NodeId, f64, f64),
    Softmax(NodeId),
    /// input, column weights, `exp(x - max) / Z` per element
    WeightedSoftmax(NodeId, NodeId, Vec<f64>),
    LogSoftmax(NodeId, Option<Vec<bool>>),
    LayerNorm(NodeId, Vec<f64>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    SortedPool(NodeId, NodeId, Vec<usize>),
    Sum(NodeId),
    RowNormalize(NodeId, Vec<f64>),
    StraightThrough(NodeId),
    Pick(NodeId, Vec<usize>),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Upper bound on `ln q` in [`Graph::weighted_softmax`].
const Q_LOG_CAP: f64 = 30.0;

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }

    /// Per-parameter gradients aligned with the store; parameters that never
    /// entered the graph get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node.0] {
                out[pid.index()] = g.clone();
            }
        }
        out
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    fn v(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Detached copy of `x`: same value, no gradient flows back.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.v(x).clone();
        self.constant(v)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.get(id).clone(), Op::Param, true);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.v(a), self.v(b));
        let (m, k, k2, n) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(shape_err(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let out = matmul(va.data(), vb.data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.v(a), self.v(b));
        let (m, k, n, k2) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(shape_err(format!("matmul_tb {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let out = matmul_tb(va.data(), vb.data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulTransB(a, b), ng))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.v(x);
        let (m, n) = (v.rows(), v.cols());
        let out = Tensor::new(&[n, m], transpose(v.data(), m, n)).expect("transpose shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::Transpose(x), ng)
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.v(a).len() != self.v(b).len() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.v(a).shape(),
                self.v(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (va, vb) = (self.v(a), self.v(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape(), data).expect("same shape");
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds row vector `b` (length = cols) to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.v(x), self.v(b));
        let c = vx.cols();
        if vb.len() != c {
            return Err(shape_err(format!("add_row: {} cols vs bias {}", c, vb.len())));
        }
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(vb.data()).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    /// Multiplies every row of `x` element-wise by row vector `v`.
    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (vx, vv) = (self.v(x), self.v(v));
        let c = vx.cols();
        if vv.len() != c {
            return Err(shape_err(format!("mul_row: {} cols vs {}", c, vv.len())));
        }
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(vv.data()).map(|(a, b)| a * b))
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(&[x, v]);
        Ok(self.push(out, Op::MulRow(x, v), ng))
    }

    /// Multiplies row `i` of `x` by `u[i]`.
    pub fn mul_rows(&mut self, x: NodeId, u: NodeId) -> Result<NodeId> {
        let (vx, vu) = (self.v(x), self.v(u));
        let (r, c) = (vx.rows(), vx.cols());
        if vu.len() != r {
            return Err(shape_err(format!("mul_rows: {} rows vs {} scales", r, vu.len())));
        }
        let mut data = vx.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let s = vu.data()[i];
            row.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(&[x, u]);
        Ok(self.push(out, Op::MulRows(x, u), ng))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let vx = self.v(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|v| v * s).collect()).expect("shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.v(s).len() != 1 {
            return Err(shape_err("scale_by expects a one-element scale"));
        }
        let sv = self.v(s).item();
        let vx = self.v(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|v| v * sv).collect())?;
        let ng = self.ng(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), ng))
    }

    fn map(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let vx = self.v(x);
        let out = Tensor::new(vx.shape(), vx.data().iter().map(|v| f(*v)).collect()).expect("shape");
        let ng = self.ng(&[x]);
        self.push(out, op, ng)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// `ln(max(x, floor))`; no gradient below the floor.
    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        self.map(x, Op::LogClamped(x, floor), |v| v.max(floor).ln())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    fn check_mask(&self, x: NodeId, mask: &Option<Vec<bool>>) -> Result<()> {
        let vx = self.v(x);
        if let Some(m) = mask {
            if m.len() != vx.len() {
                return Err(shape_err("softmax mask must cover every element"));
            }
            for (r, row) in m.chunks(vx.cols()).enumerate() {
                if !row.iter().any(|&k| k) {
                    return Err(invalid(format!("softmax row {r} has every position masked")));
                }
            }
        }
        Ok(())
    }

    /// Row-wise softmax. `mask` (one flag per element, `true` = attend) gives
    /// excluded positions a weight of exactly zero.
    pub fn softmax(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        self.check_mask(x, &mask)?;
        let vx = self.v(x);
        let c = vx.cols();
        let mut data = vec![0.0; vx.len()];
        for (r, (row, out)) in vx.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
            let mx = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                if keep(j) {
                    out[j] = (row[j] - mx).exp();
                    z += out[j];
                }
            }
            out.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Row-wise softmax with non-negative column weights `w [c]`:
    /// `p_ij = w_j·exp(x_ij) / Σ_k w_k·exp(x_ik)`.
    ///
    /// With `{0,1}` weights this equals a masked softmax (weight exactly zero
    /// where `w_j = 0`), while the gradient with respect to `w` stays defined
    /// for masked columns too.
    pub fn weighted_softmax(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.v(x), self.v(w));
        let c = vx.cols();
        if vw.len() != c {
            return Err(shape_err(format!("weighted_softmax: {} weights for {c} columns", vw.len())));
        }
        if vw.data().iter().any(|&v| v < 0.0) {
            return Err(invalid("softmax weights must be non-negative"));
        }
        let wd = vw.data();
        let mut data = vec![0.0; vx.len()];
        let mut q = vec![0.0; vx.len()];
        for (r, row) in vx.data().chunks(c).enumerate() {
            let mx = (0..c).filter(|&j| wd[j] > 0.0).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(invalid(format!("softmax row {r} has every position masked")));
            }
            let lz = (0..c).map(|j| wd[j] * (row[j] - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..c {
                // capped so a zero-weight column far above the rest stays finite
                let e = (row[j] - lz).min(Q_LOG_CAP).exp();
                q[r * c + j] = e;
                data[r * c + j] = if wd[j] == 0.0 { 0.0 } else { wd[j] * e };
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(out, Op::WeightedSoftmax(x, w, q), ng))
    }

    /// Row-wise log-softmax; masked positions are excluded from the
    /// normalizer and hold the value 0 with no gradient.
    pub fn log_softmax(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        self.check_mask(x, &mask)?;
        let vx = self.v(x);
        let c = vx.cols();
        let mut data = vec![0.0; vx.len()];
        for (r, (row, out)) in vx.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
            let mx = (0..c).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c).filter(|&j| keep(j)).map(|j| (row[j] - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                if keep(j) {
                    out[j] = row[j] - lse;
                }
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x, mask), ng))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let vx = self.v(x);
        let c = vx.cols();
        let mut data = vec![0.0; vx.len()];
        let mut inv_std = Vec::with_capacity(vx.rows());
        for (row, out) in vx.data().chunks(c).zip(data.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            inv_std.push(r);
        }
        let out = Tensor::new(vx.shape(), data).expect("shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::LayerNorm(x, inv_std), ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.v(x);
        let (r, c) = (vx.rows(), vx.cols());
        if start + len > c || len == 0 {
            return Err(shape_err(format!("slice_cols {start}..{} of {c}", start + len)));
        }
        let data = vx.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let out = Tensor::new(&[r, len], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), ng))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let r = self.v(xs[0]).rows();
        if xs.iter().any(|&x| self.v(x).rows() != r) {
            return Err(shape_err("concat_cols needs equal row counts"));
        }
        let total: usize = xs.iter().map(|&x| self.v(x).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.v(x).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        let ng = self.ng(xs);
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let c = self.v(xs[0]).cols();
        if xs.iter().any(|&x| self.v(x).cols() != c) {
            return Err(shape_err("concat_rows needs equal column counts"));
        }
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.v(x).data());
        }
        let r = data.len() / c;
        let out = Tensor::new(&[r, c], data)?;
        let ng = self.ng(xs);
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), ng))
    }

    /// Selects rows of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vx = self.v(x);
        let (r, c) = (vx.rows(), vx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err(format!("gather_rows index {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(vx.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, x: NodeId, idx: &[usize], rows: usize) -> Result<NodeId> {
        let vx = self.v(x);
        let c = vx.cols();
        if idx.len() != vx.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("scatter_rows index out of range"));
        }
        let mut data = vec![0.0; rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            data[dst * c..(dst + 1) * c].copy_from_slice(vx.row(src));
        }
        let out = Tensor::new(&[rows, c], data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::ScatterRows(x, idx.to_vec()), ng))
    }

    /// Rank-weighted pooling: each column of `x` (n rows) is sorted in
    /// descending order and combined with weights `w` (length n).
    pub fn sorted_pool(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.v(x), self.v(w));
        let (n, c) = (vx.rows(), vx.cols());
        if vw.len() != n {
            return Err(shape_err(format!("sorted_pool: {} rows vs {} weights", n, vw.len())));
        }
        let mut perm = vec![0usize; n * c];
        let mut out = vec![0.0; c];
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for j in 0..c {
            order.clear();
            order.extend(0..n);
            // stable: ties keep row order
            order.sort_by(|&a, &b| vx.at(b, j).total_cmp(&vx.at(a, j)));
            for (rank, &i) in order.iter().enumerate() {
                perm[rank * c + j] = i;
                out[j] += vw.data()[rank] * vx.at(i, j);
            }
        }
        let out = Tensor::new(&[1, c], out)?;
        let ng = self.ng(&[x, w]);
        Ok(self.push(out, Op::SortedPool(x, w, perm), ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.v(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.v(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// L2-normalizes every row; a zero row is an error.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.v(x);
        let c = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut data = Vec::with_capacity(vx.len());
        for (r, row) in vx.data().chunks(c).enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(invalid(format!("row {r} has zero or non-finite norm")));
            }
            norms.push(nrm);
            data.extend(row.iter().map(|v| v / nrm));
        }
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::RowNormalize(x, norms), ng))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, soft: NodeId, hard: Tensor) -> Result<NodeId> {
        if hard.shape() != self.v(soft).shape() {
            return Err(shape_err("straight_through: hard/soft shapes differ"));
        }
        let ng = self.ng(&[soft]);
        Ok(self.push(hard, Op::StraightThrough(soft), ng))
    }

    /// Flat element selection: output `[idx.len()]`.
    pub fn pick(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vx = self.v(x);
        if idx.iter().any(|&i| i >= vx.len()) {
            return Err(shape_err("pick index out of range"));
        }
        let data = idx.iter().map(|&i| vx.data()[i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(data), Op::Pick(x, idx.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.v(x).reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.v(loss).len() != 1 {
            return Err(shape_err("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.v(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        let params = self.param_nodes.iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], id: NodeId, data: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let t = Tensor::new(self.v(id).shape(), data).expect("grad shape");
        self.acc(grads, id, t);
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let g = gy.data();
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.v(*a), self.v(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs_grad(*a) {
                    self.acc_data(grads, *a, matmul_tb(g, vb.data(), m, n, k));
                }
                if self.needs_grad(*b) {
                    self.acc_data(grads, *b, matmul_ta(va.data(), g, m, k, n));
                }
            }
            Op::MatMulTransB(a, b) => {
                let (va, vb) = (self.v(*a), self.v(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.needs_grad(*a) {
                    self.acc_data(grads, *a, matmul(g, vb.data(), m, n, k));
                }
                if self.needs_grad(*b) {
                    self.acc_data(grads, *b, matmul_ta(g, va.data(), m, n, k));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (gy.rows(), gy.cols());
                self.acc_data(grads, *x, transpose(g, m, n));
            }
            Op::Add(a, b) => {
                self.acc_data(grads, *a, g.to_vec());
                self.acc_data(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc_data(grads, *a, g.to_vec());
                self.acc_data(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.v(*a).data(), self.v(*b).data());
                if self.needs_grad(*a) {
                    self.acc_data(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.needs_grad(*b) {
                    self.acc_data(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, b) => {
                self.acc_data(grads, *x, g.to_vec());
                if self.needs_grad(*b) {
                    let c = gy.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.acc_data(grads, *b, gb);
                }
            }
            Op::MulRow(x, v) => {
                let c = gy.cols();
                let (vx, vv) = (self.v(*x).data(), self.v(*v).data());
                if self.needs_grad(*x) {
                    let gx = g.chunks(c).flat_map(|row| row.iter().zip(vv).map(|(a, b)| a * b)).collect();
                    self.acc_data(grads, *x, gx);
                }
                if self.needs_grad(*v) {
                    let mut gv = vec![0.0; c];
                    for (gr, xr) in g.chunks(c).zip(vx.chunks(c)) {
                        for j in 0..c {
                            gv[j] += gr[j] * xr[j];
                        }
                    }
                    self.acc_data(grads, *v, gv);
                }
            }
            Op::MulRows(x, u) => {
                let c = gy.cols();
                let (vx, vu) = (self.v(*x).data(), self.v(*u).data());
                if self.needs_grad(*x) {
                    let mut gx = g.to_vec();
                    for (i, row) in gx.chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|v| *v *= vu[i]);
                    }
                    self.acc_data(grads, *x, gx);
                }
                if self.needs_grad(*u) {
                    let gu = g
                        .chunks(c)
                        .zip(vx.chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc_data(grads, *u, gu);
                }
            }
            Op::Scale(x, s) => self.acc_data(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::ScaleBy(x, s) => {
                let sv = self.v(*s).item();
                if self.needs_grad(*x) {
                    self.acc_data(grads, *x, g.iter().map(|v| v * sv).collect());
                }
                if self.needs_grad(*s) {
                    let gs = g.iter().zip(self.v(*x).data()).map(|(a, b)| a * b).sum();
                    self.acc_data(grads, *s, vec![gs]);
                }
            }
            Op::Exp(x) => self.acc_data(grads, *x, g.iter().zip(y).map(|(a, b)| a * b).collect()),
            Op::LogClamped(x, floor) => {
                let vx = self.v(*x).data();
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(a, &xv)| if xv > *floor { a / xv } else { 0.0 })
                    .collect();
                self.acc_data(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                self.acc_data(grads, *x, g.iter().zip(y).map(|(a, s)| a * s * (1.0 - s)).collect())
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(self.v(*x).data())
                    .map(|(a, &v)| {
                        let th = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        a * d
                    })
                    .collect();
                self.acc_data(grads, *x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let gx = g
                    .iter()
                    .zip(self.v(*x).data())
                    .map(|(a, v)| if v >= lo && v <= hi { *a } else { 0.0 })
                    .collect();
                self.acc_data(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let c = gy.cols();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::WeightedSoftmax(x, w, q) => {
                let c = gy.cols();
                let mut gx = vec![0.0; g.len()];
                let mut gw = vec![0.0; c];
                for (r, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = yr[j] * (gr[j] - dot);
                        gw[j] += q[r * c + j] * (gr[j] - dot);
                    }
                }
                if self.needs_grad(*x) {
                    self.acc_data(grads, *x, gx);
                }
                if self.needs_grad(*w) {
                    self.acc_data(grads, *w, gw);
                }
            }
            Op::LogSoftmax(x, mask) => {
                let c = gy.cols();
                let mut gx = vec![0.0; g.len()];
                for (r, (gr, yr)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                    let keep = |j: usize| mask.as_ref().map_or(true, |m| m[r * c + j]);
                    let gsum: f64 = (0..c).filter(|&j| keep(j)).map(|j| gr[j]).sum();
                    for j in 0..c {
                        if keep(j) {
                            gx[r * c + j] = gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::LayerNorm(x, inv_std) => {
                let c = gy.cols();
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, yr), out)) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        out[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let vx = self.v(*x);
                let (c, len) = (vx.cols(), gy.cols());
                let mut gx = vec![0.0; vx.len()];
                for (out, gr) in gx.chunks_mut(c).zip(g.chunks(len)) {
                    out[*start..start + len].copy_from_slice(gr);
                }
                self.acc_data(grads, *x, gx);
            }
            Op::ConcatCols(xs) => {
                let total = gy.cols();
                let mut off = 0;
                for &x in xs {
                    let c = self.v(x).cols();
                    if self.needs_grad(x) {
                        let gx = g.chunks(total).flat_map(|row| row[off..off + c].iter().copied()).collect();
                        self.acc_data(grads, x, gx);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.v(x).len();
                    self.acc_data(grads, x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let vx = self.v(*x);
                let c = vx.cols();
                let mut gx = vec![0.0; vx.len()];
                for (src, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[src * c + j];
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::ScatterRows(x, idx) => {
                let c = gy.cols();
                let mut gx = Vec::with_capacity(idx.len() * c);
                for &dst in idx {
                    gx.extend_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                self.acc_data(grads, *x, gx);
            }
            Op::SortedPool(x, w, perm) => {
                let (vx, vw) = (self.v(*x), self.v(*w));
                let (n, c) = (vx.rows(), vx.cols());
                if self.needs_grad(*x) {
                    let mut gx = vec![0.0; vx.len()];
                    for rank in 0..n {
                        for j in 0..c {
                            gx[perm[rank * c + j] * c + j] += vw.data()[rank] * g[j];
                        }
                    }
                    self.acc_data(grads, *x, gx);
                }
                if self.needs_grad(*w) {
                    let gw = (0..n)
                        .map(|rank| (0..c).map(|j| vx.at(perm[rank * c + j], j) * g[j]).sum())
                        .collect();
                    self.acc_data(grads, *w, gw);
                }
            }
            Op::Sum(x) => {
                let n = self.v(*x).len();
                self.acc_data(grads, *x, vec![g[0]; n]);
            }
            Op::RowNormalize(x, norms) => {
                let c = gy.cols();
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, yr), out)) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.acc_data(grads, *x, gx);
            }
            Op::StraightThrough(soft) => self.acc_data(grads, *soft, g.to_vec()),
            Op::Pick(x, idx) => {
                let mut gx = vec![0.0; self.v(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g[k];
                }
                self.acc_data(grads, *x, gx);
            }
            Op::Reshape(x) => self.acc_data(grads, *x, g.to_vec()),
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
