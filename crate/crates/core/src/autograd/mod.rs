//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a tape rebuilt on every forward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a reverse topological
//! traversal and every node is visited exactly once.

mod gradcheck;
mod params;

pub use gradcheck::{grad_check, grad_check_inputs, relative_error, FD_STEP};
pub use params::{ParamId, ParamStore, Parameter};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Matrix};

/// Added to masked logits before normalization.
const MASK_FILL: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Boolean matrix marking which entries a softmax row may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(allowed(r, c));
            }
        }
        Mask {
            rows,
            cols,
            allowed: cells,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    AddRowVec(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    MeanRows(NodeId),
    GatherRows { table: NodeId, ids: Vec<usize> },
    Softmax(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, pad: Vec<bool>, probs: Matrix, count: usize },
    Sum(NodeId),
}

/// A dynamic tape of matrix operations.
#[derive(Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Matrix>,
    grads: Vec<Option<Matrix>>,
    requires_grad: Vec<bool>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Dimension {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.requires_grad[p.0]);
        self.push_leaf(op, value, requires_grad)
    }

    fn push_leaf(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        self.requires_grad.push(requires_grad);
        id
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(Op::Leaf, value, false)
    }

    /// Free leaf whose gradient is tracked but not tied to a stored parameter.
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(Op::Leaf, value, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push_leaf(Op::Leaf, store.value(id).clone(), true);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Gradient accumulated by the last [`Graph::backward`] call, if any reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        Ok(self.push(Op::MatMul(a, b), v, &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.values[a.0].matmul_nt(&self.values[b.0])?;
        Ok(self.push(Op::MatMulNt(a, b), v, &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(dim_err(op, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(|v| -v);
        self.push(Op::Neg(x), v, &[x])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.values[x.0].map(|v| v * c);
        self.push(Op::Scale(x, c), v, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), v, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(f64::tanh);
        self.push(Op::Tanh(x), v, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0].map(sigmoid);
        self.push(Op::Sigmoid(x), v, &[x])
    }

    /// Adds a `1×c` row vector to every row of an `n×c` matrix.
    pub fn add_row_vec(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (&self.values[x.0], &self.values[b.0]);
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(dim_err("add_row_vec", vx, vb));
        }
        let mut v = vx.clone();
        for r in 0..v.rows() {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(Op::AddRowVec(x, b), v, &[x, b]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.values[first.0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.values[p.0];
            if v.cols() != cols {
                return Err(dim_err("concat_rows", &self.values[first.0], v));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, parts))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.values[first.0].rows();
        let mut cols = 0;
        for p in parts {
            let v = &self.values[p.0];
            if v.rows() != rows {
                return Err(dim_err("concat_cols", &self.values[first.0], v));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.values[p.0].row(r));
            }
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, parts))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = &self.values[x.0];
        if len == 0 || start + len > vx.rows() {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                limit: vx.rows(),
            });
        }
        let cols = vx.cols();
        let v = Matrix::from_vec(len, cols, vx.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(Op::SliceRows { x, start }, v, &[x]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = &self.values[x.0];
        if len == 0 || start + len > vx.cols() {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                limit: vx.cols(),
            });
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let v = Matrix::from_vec(vx.rows(), len, data)?;
        Ok(self.push(Op::SliceCols { x, start }, v, &[x]))
    }

    /// Column-wise mean, `n×c → 1×c`.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let vx = &self.values[x.0];
        let mut out = Matrix::zeros(1, vx.cols());
        for r in 0..vx.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        let n = vx.rows() as f64;
        out.data_mut().iter_mut().for_each(|o| *o /= n);
        self.push(Op::MeanRows(x), out, &[x])
    }

    /// Stacks `table[ids[i]]` as row `i` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = &self.values[table.0];
        let mut data = Vec::with_capacity(ids.len() * vt.cols());
        for &id in ids {
            if id >= vt.rows() {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: id,
                    limit: vt.rows(),
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let v = Matrix::from_vec(ids.len(), vt.cols(), data)?;
        Ok(self.push(Op::GatherRows { table, ids: ids.to_vec() }, v, &[table]))
    }

    /// Row-wise softmax with max subtraction. Masked cells come out exactly 0.
    pub fn row_softmax(&mut self, x: NodeId, mask: Option<&Mask>) -> Result<NodeId> {
        let vx = &self.values[x.0];
        if let Some(m) = mask {
            if m.shape() != vx.shape() {
                return Err(Error::Dimension {
                    op: "row_softmax",
                    left: vx.shape(),
                    right: m.shape(),
                });
            }
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            if let Some(m) = mask {
                let mut any = false;
                for (c, v) in row.iter_mut().enumerate() {
                    if m.allowed(r, c) {
                        any = true;
                    } else {
                        *v += MASK_FILL;
                    }
                }
                if !any {
                    return Err(Error::DegenerateMask { row: r });
                }
            }
            softmax_in_place(row);
        }
        Ok(self.push(Op::Softmax(x), out, &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`,
    /// skipping positions where `pad` is true.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], pad: &[bool]) -> Result<NodeId> {
        let vl = &self.values[logits.0];
        if targets.len() != vl.rows() || pad.len() != vl.rows() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: vl.shape(),
                right: (targets.len(), pad.len()),
            });
        }
        let count = pad.iter().filter(|p| !**p).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vl.clone();
        let mut total = 0.0;
        for (r, (&t, &skip)) in targets.iter().zip(pad).enumerate() {
            if skip {
                continue;
            }
            if t >= vl.cols() {
                return Err(Error::Vocab { id: t, size: vl.cols() });
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        let v = Matrix::scalar(total / count as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad: pad.to_vec(),
                probs,
                count,
            },
            v,
            &[logits],
        ))
    }

    /// Sum of all entries, `→ 1×1`.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::scalar(self.values[x.0].sum());
        self.push(Op::Sum(x), v, &[x])
    }

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    ///
    /// Node gradients are reset on each call; parameter gradients accumulate
    /// only through [`Graph::accumulate_param_grads`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.backward_scaled(root, 1.0)
    }

    /// As [`Graph::backward`], seeding the root gradient with `seed` instead of 1.
    pub fn backward_scaled(&mut self, root: NodeId, seed: f64) -> Result<()> {
        if self.values[root.0].shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 root, got {:?}",
                self.values[root.0].shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(Matrix::scalar(seed));

        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.requires_grad[i] {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = &self.grads[node.0] {
                store.get_mut(pid).grad.add_assign(g);
            }
        }
    }

    fn slot(&mut self, id: NodeId) -> Option<&mut Matrix> {
        if !self.requires_grad[id.0] {
            return None;
        }
        Some(grad_slot(&self.values, &mut self.grads, id))
    }

    fn acc(&mut self, id: NodeId, f: impl Fn(&mut [f64], &[f64]), other: &Matrix) {
        if let Some(slot) = self.slot(id) {
            f(slot.data_mut(), other.data());
        }
    }

    fn propagate(&mut self, i: usize, g: &Matrix) {
        // Temporarily move the op out so `self` stays borrowable.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.requires_grad[a.0] {
                    gemm_nt(g, &self.values[b.0], grad_slot(&self.values, &mut self.grads, a));
                }
                if self.requires_grad[b.0] {
                    gemm_tn(&self.values[a.0], g, grad_slot(&self.values, &mut self.grads, b));
                }
            }
            &Op::MatMulNt(a, b) => {
                if self.requires_grad[a.0] {
                    gemm_nn(g, &self.values[b.0], grad_slot(&self.values, &mut self.grads, a));
                }
                if self.requires_grad[b.0] {
                    gemm_tn(g, &self.values[a.0], grad_slot(&self.values, &mut self.grads, b));
                }
            }
            &Op::Add(a, b) => {
                self.acc(a, add_into, g);
                self.acc(b, add_into, g);
            }
            &Op::Sub(a, b) => {
                self.acc(a, add_into, g);
                self.acc(b, sub_into, g);
            }
            &Op::Mul(a, b) => {
                if self.requires_grad[a.0] {
                    let gb = hadamard(g, &self.values[b.0]);
                    self.acc(a, add_into, &gb);
                }
                if self.requires_grad[b.0] {
                    let ga = hadamard(g, &self.values[a.0]);
                    self.acc(b, add_into, &ga);
                }
            }
            &Op::Neg(x) => self.acc(x, sub_into, g),
            &Op::Scale(x, c) => {
                let scaled = g.map(|v| v * c);
                self.acc(x, add_into, &scaled);
            }
            &Op::Relu(x) => {
                let local = zip_map(g, &self.values[x.0], |g, v| if v > 0.0 { g } else { 0.0 });
                self.acc(x, add_into, &local);
            }
            &Op::Tanh(x) => {
                let local = zip_map(g, &self.values[i], |g, y| g * (1.0 - y * y));
                self.acc(x, add_into, &local);
            }
            &Op::Sigmoid(x) => {
                let local = zip_map(g, &self.values[i], |g, y| g * y * (1.0 - y));
                self.acc(x, add_into, &local);
            }
            &Op::AddRowVec(x, b) => {
                self.acc(x, add_into, g);
                if let Some(slot) = self.slot(b) {
                    for r in 0..g.rows() {
                        add_into(slot.data_mut(), g.row(r));
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.values[p.0].rows() * g.cols();
                    if let Some(slot) = self.slot(p) {
                        add_into(slot.data_mut(), &g.data()[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.values[p.0].cols();
                    if let Some(slot) = self.slot(p) {
                        for r in 0..g.rows() {
                            add_into(slot.row_mut(r), &g.row(r)[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceRows { x, start } => {
                if let Some(slot) = self.slot(x) {
                    let c = g.cols();
                    add_into(&mut slot.data_mut()[start * c..(start + g.rows()) * c], g.data());
                }
            }
            &Op::SliceCols { x, start } => {
                if let Some(slot) = self.slot(x) {
                    for r in 0..g.rows() {
                        add_into(&mut slot.row_mut(r)[start..start + g.cols()], g.row(r));
                    }
                }
            }
            &Op::MeanRows(x) => {
                if let Some(slot) = self.slot(x) {
                    let n = slot.rows() as f64;
                    for r in 0..slot.rows() {
                        for (s, &gv) in slot.row_mut(r).iter_mut().zip(g.data()) {
                            *s += gv / n;
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(slot) = self.slot(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(slot.row_mut(id), g.row(r));
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = &self.values[i];
                let mut local = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in local.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc(x, add_into, &local);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                probs,
                count,
            } => {
                let scale = g.item() / *count as f64;
                if let Some(slot) = self.slot(*logits) {
                    for (r, (&t, &skip)) in targets.iter().zip(pad).enumerate() {
                        if skip {
                            continue;
                        }
                        let row = slot.row_mut(r);
                        for (s, &p) in row.iter_mut().zip(probs.row(r)) {
                            *s += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
            &Op::Sum(x) => {
                let gv = g.item();
                if let Some(slot) = self.slot(x) {
                    slot.data_mut().iter_mut().for_each(|s| *s += gv);
                }
            }
        }
        self.ops[i] = op;
    }
}

fn grad_slot<'a>(values: &[Matrix], grads: &'a mut [Option<Matrix>], id: NodeId) -> &'a mut Matrix {
    let (r, c) = values[id.0].shape();
    grads[id.0].get_or_insert_with(|| Matrix::zeros(r, c))
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sub_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d -= s;
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip_map(a, b, |x, y| x * y)
}

#[cfg(test)]
mod tests;
