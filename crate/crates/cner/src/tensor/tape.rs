//! Operation tape for reverse-mode differentiation.
//!
//! Nodes are appended in topological order; [`Tape::backward`] walks them in
//! reverse, accumulating gradients into every `requires_grad` tensor.
//! [`Tape::replay`] recomputes all node values from the current leaf data,
//! which is what the finite-difference checker perturbs.

use crate::error::{Error, Result};
use crate::tensor::{for_each_lane, Tensor};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// out[i,j] = a[i,j] + v[j]
    AddRowVec(TensorId, TensorId),
    Scale(TensorId, f64),
    Square(TensorId),
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Row(TensorId, usize),
    SliceCols {
        input: TensorId,
        from: usize,
        to: usize,
    },
    ConcatCols(Vec<TensorId>),
    /// Stacks K equal-shape [r,c] tensors into [K,r,c].
    StackFirst(Vec<TensorId>),
    /// out[i,:] = table[ids[i],:]
    GatherRows {
        table: TensorId,
        ids: Vec<usize>,
    },
    Gelu(TensorId),
    Softmax {
        input: TensorId,
        axis: usize,
    },
    LogSoftmax {
        input: TensorId,
        axis: usize,
    },
    LayerNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    SumAll(TensorId),
    SumAxis {
        input: TensorId,
        axis: usize,
    },
    /// -sum(target * logp) over one log-distribution row.
    CeRow {
        logp: TensorId,
        target: Vec<f64>,
    },
    /// -(1/n) * sum_i eta[i] * sum_e targets[i,e] * logp[i,e]
    WeightedCe {
        logp: TensorId,
        targets: Vec<f64>,
        eta: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of tensor operations; see module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        id
    }

    /// Inserts an input tensor detached from gradient flow.
    pub fn constant(&mut self, mut tensor: Tensor) -> TensorId {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].tensor.item()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    /// Mutable access to a leaf's data, for perturbation + [`Tape::replay`].
    pub fn leaf_data_mut(&mut self, id: TensorId) -> &mut [f64] {
        debug_assert!(matches!(self.nodes[id.0].op, Op::Leaf));
        &mut self.nodes[id.0].tensor.data
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    fn push(&mut self, shape: Vec<usize>, op: Op, requires_grad: bool) -> TensorId {
        let data = self.eval(&op);
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        id
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    // ── Op constructors ─────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(shape, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(shape, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(shape, Op::Mul(a, b), rg))
    }

    pub fn add_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (sa, sv) = (self.shape(a).to_vec(), self.shape(v).to_vec());
        if sa.len() != 2 || sv.len() != 1 || sa[1] != sv[0] {
            return Err(Error::Dimension {
                op: "add_row_vec",
                lhs: sa,
                rhs: sv,
            });
        }
        let rg = self.any_requires(&[a, v]);
        Ok(self.push(sa, Op::AddRowVec(a, v), rg))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires(&[a]);
        self.push(shape, Op::Scale(a, factor), rg)
    }

    pub fn square(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires(&[a]);
        self.push(shape, Op::Square(a), rg)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let shape = vec![sa[0], sb[1]];
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(shape, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: sa,
                rhs: vec![],
            });
        }
        let shape = vec![sa[1], sa[0]];
        let rg = self.any_requires(&[a]);
        Ok(self.push(shape, Op::Transpose(a), rg))
    }

    pub fn row(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || index >= sa[0] {
            return Err(Error::Contract(format!(
                "row {} out of bounds for shape {:?}",
                index, sa
            )));
        }
        let shape = vec![sa[1]];
        let rg = self.any_requires(&[a]);
        Ok(self.push(shape, Op::Row(a, index), rg))
    }

    pub fn slice_cols(&mut self, a: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || from >= to || to > sa[1] {
            return Err(Error::Contract(format!(
                "column slice {}..{} invalid for shape {:?}",
                from, to, sa
            )));
        }
        let shape = vec![sa[0], to - from];
        let rg = self.any_requires(&[a]);
        Ok(self.push(shape, Op::SliceCols { input: a, from, to }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            cols += sp[1];
        }
        let rg = self.any_requires(parts);
        Ok(self.push(vec![rows, cols], Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn stack_first(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_first of zero tensors".into()));
        }
        let inner = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::Dimension {
                    op: "stack_first",
                    lhs: inner,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let rg = self.any_requires(parts);
        Ok(self.push(shape, Op::StackFirst(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: st,
                rhs: vec![ids.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::Input(format!(
                "row id {} out of range for table with {} rows",
                bad, st[0]
            )));
        }
        let shape = vec![ids.len(), st[1]];
        let rg = self.any_requires(&[table]);
        Ok(self.push(
            shape,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires(&[a]);
        self.push(shape, Op::Gelu(a), rg)
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires(&[a]);
        Ok(self.push(shape, Op::Softmax { input: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("log_softmax", a, axis)?;
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires(&[a]);
        Ok(self.push(shape, Op::LogSoftmax { input: a, axis }, rg))
    }

    /// Normalizes the last axis to zero mean / unit variance, then scales by
    /// `gamma` and shifts by `beta`.
    pub fn layer_norm(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(input).to_vec();
        let d = *s.last().ok_or_else(|| {
            Error::Contract("layer_norm on rank-0 tensor".into())
        })?;
        for &p in &[gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: s,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rg = self.any_requires(&[input, gamma, beta]);
        Ok(self.push(
            s,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let rg = self.any_requires(&[a]);
        self.push(vec![1], Op::SumAll(a), rg)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        self.check_axis("sum_axis", a, axis)?;
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.any_requires(&[a]);
        Ok(self.push(shape, Op::SumAxis { input: a, axis }, rg))
    }

    /// `-sum(target * logp)` for one log-distribution row. A target of all
    /// zeros yields exactly 0 (the token is masked out of the loss).
    pub fn cross_entropy_row(&mut self, logp: TensorId, target: &[f64]) -> Result<TensorId> {
        let s = self.shape(logp).to_vec();
        if s.len() != 1 || s[0] != target.len() {
            return Err(Error::Dimension {
                op: "cross_entropy_row",
                lhs: s,
                rhs: vec![target.len()],
            });
        }
        validate_target_row(target)?;
        let rg = self.any_requires(&[logp]);
        Ok(self.push(
            vec![1],
            Op::CeRow {
                logp,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Token-weighted cross entropy over a `[n, classes]` log-distribution:
    /// `-(1/n) * sum_i eta[i] * <targets[i], logp[i]>`. All-zero target rows
    /// contribute nothing but still count in the `1/n` normalizer.
    pub fn weighted_ce(&mut self, logp: TensorId, targets: &[f64], eta: &[f64]) -> Result<TensorId> {
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || s[0] * s[1] != targets.len() {
            return Err(Error::Dimension {
                op: "weighted_ce",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        if eta.len() != s[0] {
            return Err(Error::Dimension {
                op: "weighted_ce",
                lhs: vec![s[0]],
                rhs: vec![eta.len()],
            });
        }
        for row in targets.chunks(s[1]) {
            validate_target_row(row)?;
        }
        let rg = self.any_requires(&[logp]);
        Ok(self.push(
            vec![1],
            Op::WeightedCe {
                logp,
                targets: targets.to_vec(),
                eta: eta.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar mean of scalar nodes.
    pub fn mean_of(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("mean_of zero tensors".into()));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(self.scale(acc, 1.0 / parts.len() as f64))
    }

    // ── Forward evaluation ──────────────────────────────────────────

    fn eval(&self, op: &Op) -> Vec<f64> {
        match op {
            Op::Leaf => unreachable!("leaf values are never recomputed"),
            Op::Add(a, b) => zip_map(self.data(*a), self.data(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_map(self.data(*a), self.data(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_map(self.data(*a), self.data(*b), |x, y| x * y),
            Op::AddRowVec(a, v) => {
                let cols = self.shape(*v)[0];
                let vd = self.data(*v);
                self.data(*a)
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + vd[i % cols])
                    .collect()
            }
            Op::Scale(a, c) => self.data(*a).iter().map(|x| x * c).collect(),
            Op::Square(a) => self.data(*a).iter().map(|x| x * x).collect(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut s = 0.0;
                        for p in 0..k {
                            s += ad[i * k + p] * bd[p * n + j];
                        }
                        out[i * n + j] = s;
                    }
                }
                out
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ad = self.data(*a);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = ad[i * c + j];
                    }
                }
                out
            }
            Op::Row(a, i) => {
                let c = self.shape(*a)[1];
                self.data(*a)[i * c..(i + 1) * c].to_vec()
            }
            Op::SliceCols { input, from, to } => {
                let (r, c) = (self.shape(*input)[0], self.shape(*input)[1]);
                let d = self.data(*input);
                let mut out = Vec::with_capacity(r * (to - from));
                for i in 0..r {
                    out.extend_from_slice(&d[i * c + from..i * c + to]);
                }
                out
            }
            Op::ConcatCols(parts) => {
                let rows = self.shape(parts[0])[0];
                let mut out = Vec::new();
                for i in 0..rows {
                    for &p in parts {
                        let c = self.shape(p)[1];
                        out.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
                    }
                }
                out
            }
            Op::StackFirst(parts) => {
                let mut out = Vec::new();
                for &p in parts {
                    out.extend_from_slice(self.data(p));
                }
                out
            }
            Op::GatherRows { table, ids } => {
                let c = self.shape(*table)[1];
                let d = self.data(*table);
                let mut out = Vec::with_capacity(ids.len() * c);
                for &i in ids {
                    out.extend_from_slice(&d[i * c..(i + 1) * c]);
                }
                out
            }
            Op::Gelu(a) => self.data(*a).iter().map(|&x| gelu(x)).collect(),
            Op::Softmax { input, axis } => {
                let shape = self.shape(*input);
                let d = self.data(*input);
                let mut out = vec![0.0; d.len()];
                let len = shape[*axis];
                for_each_lane(shape, *axis, |base, stride| {
                    let mut max = f64::NEG_INFINITY;
                    for k in 0..len {
                        max = max.max(d[base + k * stride]);
                    }
                    let mut sum = 0.0;
                    for k in 0..len {
                        let e = (d[base + k * stride] - max).exp();
                        out[base + k * stride] = e;
                        sum += e;
                    }
                    for k in 0..len {
                        out[base + k * stride] /= sum;
                    }
                });
                out
            }
            Op::LogSoftmax { input, axis } => {
                let shape = self.shape(*input);
                let d = self.data(*input);
                let mut out = vec![0.0; d.len()];
                let len = shape[*axis];
                for_each_lane(shape, *axis, |base, stride| {
                    let mut max = f64::NEG_INFINITY;
                    for k in 0..len {
                        max = max.max(d[base + k * stride]);
                    }
                    let mut sum = 0.0;
                    for k in 0..len {
                        sum += (d[base + k * stride] - max).exp();
                    }
                    let log_z = max + sum.ln();
                    for k in 0..len {
                        out[base + k * stride] = d[base + k * stride] - log_z;
                    }
                });
                out
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let shape = self.shape(*input);
                let d = *shape.last().unwrap();
                let x = self.data(*input);
                let g = self.data(*gamma);
                let b = self.data(*beta);
                let mut out = vec![0.0; x.len()];
                for (r, row) in x.chunks(d).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        out[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
                    }
                }
                out
            }
            Op::SumAll(a) => vec![self.data(*a).iter().sum()],
            Op::SumAxis { input, axis } => {
                let shape = self.shape(*input);
                let d = self.data(*input);
                let len = shape[*axis];
                let mut out = Vec::with_capacity(d.len() / len);
                for_each_lane(shape, *axis, |base, stride| {
                    let mut s = 0.0;
                    for k in 0..len {
                        s += d[base + k * stride];
                    }
                    out.push(s);
                });
                out
            }
            Op::CeRow { logp, target } => {
                let lp = self.data(*logp);
                let mut s = 0.0;
                for (t, l) in target.iter().zip(lp) {
                    s += t * l;
                }
                vec![-s]
            }
            Op::WeightedCe { logp, targets, eta } => {
                let lp = self.data(*logp);
                let n = eta.len();
                let c = lp.len() / n;
                let mut s = 0.0;
                for i in 0..n {
                    let mut row = 0.0;
                    for e in 0..c {
                        row += targets[i * c + e] * lp[i * c + e];
                    }
                    s += eta[i] * row;
                }
                vec![-s / n as f64]
            }
        }
    }

    /// Recomputes every non-leaf node from the current leaf data, in order.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // Ops only reference earlier nodes, so evaluating against the
            // current state is safe.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let data = self.eval(&op);
            self.nodes[i].op = op;
            self.nodes[i].tensor.data = data;
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulates `d loss / d tensor` into every `requires_grad` tensor
    /// reachable from `loss`. Running twice without [`Tape::zero_grads`]
    /// doubles the gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].tensor.shape
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.tensor.numel()])
            .collect();
        grads[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let gy = std::mem::take(&mut grads[i]);
            self.propagate(i, &gy, &mut grads);
            grads[i] = gy;
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if node.tensor.requires_grad {
                node.tensor.accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Vec<f64>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                axpy(&mut grads[a.0], gy, 1.0);
                axpy(&mut grads[b.0], gy, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(&mut grads[a.0], gy, 1.0);
                axpy(&mut grads[b.0], gy, -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                for ((g, y), x) in grads[a.0].iter_mut().zip(gy).zip(bd) {
                    *g += y * x;
                }
                for ((g, y), x) in grads[b.0].iter_mut().zip(gy).zip(ad) {
                    *g += y * x;
                }
            }
            Op::AddRowVec(a, v) => {
                axpy(&mut grads[a.0], gy, 1.0);
                let cols = self.shape(*v)[0];
                for (i, y) in gy.iter().enumerate() {
                    grads[v.0][i % cols] += y;
                }
            }
            Op::Scale(a, c) => axpy(&mut grads[a.0], gy, *c),
            Op::Square(a) => {
                let ad = self.data(*a);
                for ((g, y), x) in grads[a.0].iter_mut().zip(gy).zip(ad) {
                    *g += 2.0 * x * y;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                // dA = dC @ B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gy[i * n + j] * bd[p * n + j];
                        }
                        grads[a.0][i * k + p] += s;
                    }
                }
                // dB = A^T @ dC
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += ad[i * k + p] * gy[i * n + j];
                        }
                        grads[b.0][p * n + j] += s;
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                for i in 0..r {
                    for j in 0..c {
                        grads[a.0][i * c + j] += gy[j * r + i];
                    }
                }
            }
            Op::Row(a, idx) => {
                let c = self.shape(*a)[1];
                for (j, y) in gy.iter().enumerate() {
                    grads[a.0][idx * c + j] += y;
                }
            }
            Op::SliceCols { input, from, to } => {
                let (r, c) = (self.shape(*input)[0], self.shape(*input)[1]);
                let w = to - from;
                for i in 0..r {
                    for j in 0..w {
                        grads[input.0][i * c + from + j] += gy[i * w + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.shape(parts[0])[0];
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                for i in 0..rows {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        for j in 0..c {
                            grads[p.0][i * c + j] += gy[i * total + off + j];
                        }
                        off += c;
                    }
                }
            }
            Op::StackFirst(parts) => {
                let inner = self.nodes[parts[0].0].tensor.numel();
                for (k, &p) in parts.iter().enumerate() {
                    axpy(&mut grads[p.0], &gy[k * inner..(k + 1) * inner], 1.0);
                }
            }
            Op::GatherRows { table, ids } => {
                let c = self.shape(*table)[1];
                for (i, &row) in ids.iter().enumerate() {
                    for j in 0..c {
                        grads[table.0][row * c + j] += gy[i * c + j];
                    }
                }
            }
            Op::Gelu(a) => {
                let ad = self.data(*a);
                for ((g, y), &x) in grads[a.0].iter_mut().zip(gy).zip(ad) {
                    *g += y * gelu_deriv(x);
                }
            }
            Op::Softmax { input, axis } => {
                let shape = self.shape(*input);
                let y = &self.nodes[i].tensor.data;
                let len = shape[*axis];
                let gx = &mut grads[input.0];
                for_each_lane(shape, *axis, |base, stride| {
                    let mut dot = 0.0;
                    for k in 0..len {
                        let idx = base + k * stride;
                        dot += gy[idx] * y[idx];
                    }
                    for k in 0..len {
                        let idx = base + k * stride;
                        gx[idx] += y[idx] * (gy[idx] - dot);
                    }
                });
            }
            Op::LogSoftmax { input, axis } => {
                let shape = self.shape(*input);
                let lp = &self.nodes[i].tensor.data;
                let len = shape[*axis];
                let gx = &mut grads[input.0];
                for_each_lane(shape, *axis, |base, stride| {
                    let mut s = 0.0;
                    for k in 0..len {
                        s += gy[base + k * stride];
                    }
                    for k in 0..len {
                        let idx = base + k * stride;
                        gx[idx] += gy[idx] - lp[idx].exp() * s;
                    }
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let shape = self.shape(*input);
                let d = *shape.last().unwrap();
                let x = self.data(*input);
                let g = self.data(*gamma);
                for (r, row) in x.chunks(d).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let gy_row = &gy[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    let mut xhat = vec![0.0; d];
                    let mut dxhat = vec![0.0; d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = gy_row[j] * g[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                        grads[gamma.0][j] += gy_row[j] * xhat[j];
                        grads[beta.0][j] += gy_row[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        grads[input.0][r * d + j] +=
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
            Op::SumAll(a) => axpy_scalar(&mut grads[a.0], gy[0]),
            Op::SumAxis { input, axis } => {
                let shape = self.shape(*input);
                let len = shape[*axis];
                let gx = &mut grads[input.0];
                let mut lane = 0;
                for_each_lane(shape, *axis, |base, stride| {
                    for k in 0..len {
                        gx[base + k * stride] += gy[lane];
                    }
                    lane += 1;
                });
            }
            Op::CeRow { logp, target } => {
                for (g, t) in grads[logp.0].iter_mut().zip(target) {
                    *g += -t * gy[0];
                }
            }
            Op::WeightedCe { logp, targets, eta } => {
                let n = eta.len();
                let c = targets.len() / n;
                let scale = -gy[0] / n as f64;
                for i in 0..n {
                    for e in 0..c {
                        grads[logp.0][i * c + e] += scale * eta[i] * targets[i * c + e];
                    }
                }
            }
        }
    }

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, op: &'static str, a: TensorId, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Contract(format!(
                "{}: axis {} out of range for shape {:?}",
                op,
                axis,
                self.shape(a)
            )));
        }
        Ok(())
    }
}

fn validate_target_row(row: &[f64]) -> Result<()> {
    let mut ones = 0;
    for &t in row {
        if t == 1.0 {
            ones += 1;
        } else if t != 0.0 {
            return Err(Error::Contract(format!(
                "target row entries must be 0 or 1, got {}",
                t
            )));
        }
    }
    if ones > 1 {
        return Err(Error::Contract(format!(
            "target row has {} ones, at most one allowed",
            ones
        )));
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn axpy(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * factor;
    }
}

fn axpy_scalar(dst: &mut [f64], v: f64) {
    for d in dst.iter_mut() {
        *d += v;
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x.powi(3));
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}
