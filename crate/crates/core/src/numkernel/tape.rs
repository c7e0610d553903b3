//! Reverse-mode differentiation over a recorded list of matrix operations.
//!
//! A [`Tape`] borrows a parameter list for the duration of one forward pass.
//! Parameter matrices are never copied wholesale into the tape unless they
//! are requested through [`Tape::param`]; large tables are read row-wise via
//! [`Tape::gather`] and [`Tape::sampled_softmax_ce`]. [`Tape::backward`]
//! accumulates scaled gradients straight into a caller-owned buffer shaped
//! like the parameter list, so many tapes can feed one optimizer step.

use std::collections::HashMap;

use super::matrix::{dot, Matrix};
use super::ops::{normalize_row, softmax_in_place};
use crate::error::{Error, Result};

/// Additive logit applied to masked attention positions.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    Gather {
        param: usize,
        rows: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    MatMulTransposed(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Matrix>,
    },
    RowSum(NodeId),
    Softmax(NodeId),
    MeanRows(NodeId),
    StackRows(Vec<(NodeId, usize)>),
    Sum(NodeId),
    Pick {
        input: NodeId,
        row: usize,
        col: usize,
    },
    SampledCe {
        hidden: NodeId,
        table: usize,
        targets: Vec<CeTarget>,
        probs: Vec<Vec<f64>>,
    },
}

/// One supervised position: logits are taken against `candidates`, whose
/// first entry is the positive.
#[derive(Clone, Debug, PartialEq)]
pub struct CeTarget {
    pub position: usize,
    pub candidates: Vec<usize>,
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn param_matrix(&self, index: usize) -> Result<&'p Matrix> {
        self.params
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no parameter #{index}")))
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    /// Whole parameter as a node. Repeated requests share one node.
    pub fn param(&mut self, index: usize) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(&index) {
            return Ok(id);
        }
        let value = self.param_matrix(index)?.clone();
        let id = self.push(value, Op::Param(index));
        self.param_nodes.insert(index, id);
        Ok(id)
    }

    /// Selected rows of a parameter, in the given order.
    pub fn gather(&mut self, param: usize, rows: &[usize]) -> Result<NodeId> {
        let table = self.param_matrix(param)?;
        if let Some(bad) = rows.iter().find(|&&r| r >= table.rows()) {
            return Err(Error::Dimension(format!(
                "row {bad} of a {}-row table",
                table.rows()
            )));
        }
        let mut value = Matrix::zeros(rows.len(), table.cols());
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(table.row(r));
        }
        Ok(self.push(
            value,
            Op::Gather {
                param,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_transposed(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_transposed(self.value(b))?;
        Ok(self.push(value, Op::MatMulTransposed(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let bias = self.value(row);
        let x = self.value(a);
        if bias.rows() != 1 || bias.cols() != x.cols() {
            return Err(Error::Dimension(format!(
                "broadcast {}x{} onto {}x{}",
                bias.rows(),
                bias.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Elementwise product with a fixed mask (see `ops::dropout_mask`).
    pub fn dropout(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Dimension("dropout mask length".into()));
        }
        let mut value = self.value(a).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push(value, Op::Dropout { input: a, mask }))
    }

    /// Row-wise layer norm; `gain` and `bias` are `1 x cols` nodes.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let x = self.value(a);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, x.cols()) || b.shape() != (1, x.cols()) {
            return Err(Error::Dimension("layer norm gain/bias shape".into()));
        }
        let mut normalized = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let (row, inv) = normalize_row(x.row(r), eps);
            for (c, n) in row.iter().enumerate() {
                value.set(r, c, g.get(0, c) * n + b.get(0, c));
            }
            normalized.row_mut(r).copy_from_slice(&row);
            inv_std.push(inv);
        }
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: a,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Scaled dot-product attention in which position `i` only sees `j <= i`.
    /// Columns are split evenly across `heads`.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        if qm.shape() != km.shape() || qm.shape() != vm.shape() {
            return Err(Error::Dimension("attention q/k/v shapes differ".into()));
        }
        let (len, width) = qm.shape();
        if heads == 0 || width % heads != 0 {
            return Err(Error::Dimension(format!("{width} columns over {heads} heads")));
        }
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = Matrix::zeros(len, width);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * head_dim..(h + 1) * head_dim;
            let mut p = Matrix::zeros(len, len);
            for i in 0..len {
                let qi = &qm.row(i)[cols.clone()];
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j <= i {
                        dot(qi, &km.row(j)[cols.clone()]) * scale
                    } else {
                        MASK_VALUE
                    };
                }
                softmax_in_place(row);
            }
            for i in 0..len {
                for j in 0..=i {
                    let w = p.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &vm.row(j)[cols.clone()];
                    for (o, x) in out.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// `n x m -> n x 1`, i.e. right-multiplication by the all-ones vector.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let sums: Vec<f64> = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.push(Matrix::col_vector(&sums), Op::RowSum(a))
    }

    /// Softmax over every entry of `a` taken as one vector.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let mut value = self.value(a).clone();
        if value.is_empty() {
            return Err(Error::Dimension("softmax of an empty vector".into()));
        }
        softmax_in_place(value.data_mut());
        Ok(self.push(value, Op::Softmax(a)))
    }

    /// Column means, `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Dimension("mean over zero rows".into()));
        }
        let n = x.rows() as f64;
        let mut value = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (m, v) in value.data_mut().iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        value.data_mut().iter_mut().for_each(|m| *m /= n);
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Builds a matrix whose `i`-th row is row `sources[i].1` of node
    /// `sources[i].0`.
    pub fn stack_rows(&mut self, sources: &[(NodeId, usize)]) -> Result<NodeId> {
        let cols = match sources.first() {
            Some(&(node, _)) => self.value(node).cols(),
            None => return Err(Error::Dimension("stacking zero rows".into())),
        };
        let mut value = Matrix::zeros(sources.len(), cols);
        for (i, &(node, row)) in sources.iter().enumerate() {
            let src = self.value(node);
            if src.cols() != cols || row >= src.rows() {
                return Err(Error::Dimension("stack_rows source shape".into()));
            }
            value.row_mut(i).copy_from_slice(src.row(row));
        }
        Ok(self.push(value, Op::StackRows(sources.to_vec())))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).sum();
        self.push(Matrix::filled(1, 1, total), Op::Sum(a))
    }

    pub fn pick(&mut self, a: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let x = self.value(a);
        if row >= x.rows() || col >= x.cols() {
            return Err(Error::Dimension(format!("pick ({row},{col}) of {:?}", x.shape())));
        }
        let v = x.get(row, col);
        Ok(self.push(Matrix::filled(1, 1, v), Op::Pick { input: a, row, col }))
    }

    /// Mean over `targets` of `-log softmax(h_p . E_c)[positive]`, where `E` is
    /// parameter `table` and the first candidate is the positive.
    pub fn sampled_softmax_ce(&mut self, hidden: NodeId, table: usize, targets: Vec<CeTarget>) -> Result<NodeId> {
        let emb = self.param_matrix(table)?;
        let h = self.value(hidden);
        if targets.is_empty() {
            return Err(Error::Contract("cross entropy over zero targets".into()));
        }
        if emb.cols() != h.cols() {
            return Err(Error::Dimension("hidden width differs from table width".into()));
        }
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for t in &targets {
            if t.position >= h.rows() || t.candidates.is_empty() {
                return Err(Error::Contract("cross entropy target out of range".into()));
            }
            if let Some(bad) = t.candidates.iter().find(|&&c| c >= emb.rows()) {
                return Err(Error::Dimension(format!("candidate {bad} outside table")));
            }
            let hp = h.row(t.position);
            let mut logits: Vec<f64> = t.candidates.iter().map(|&c| dot(hp, emb.row(c))).collect();
            let lse = super::ops::log_sum_exp(&logits);
            total += lse - logits[0];
            softmax_in_place(&mut logits);
            probs.push(logits);
        }
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::SampledCe {
                hidden,
                table,
                targets,
                probs,
            },
        ))
    }

    /// Propagates from the scalar `root` and adds `scale * dL/dparam` into
    /// `param_grads`, which must mirror the tape's parameter list.
    pub fn backward(&self, root: NodeId, param_grads: &mut [Matrix], scale: f64) -> Result<()> {
        let root_node = self.nodes.get(root.0).ok_or(Error::NoForwardPass)?;
        if root_node.value.shape() != (1, 1) {
            return Err(Error::Dimension("backward from a non-scalar node".into()));
        }
        if param_grads.len() != self.params.len() {
            return Err(Error::Dimension("gradient buffer does not mirror parameters".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => param_grads[*p].add_scaled(&g, scale),
                Op::Gather { param, rows } => {
                    let target = &mut param_grads[*param];
                    for (i, &r) in rows.iter().enumerate() {
                        for (t, v) in target.row_mut(r).iter_mut().zip(g.row(i)) {
                            *t += scale * v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_transposed(self.value(*b))?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTransposed(a, b) => {
                    let da = g.matmul(self.value(*b))?;
                    let db = g.transpose().matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *row, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let mut da = g;
                    for (d, x) in da.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if *x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Dropout { input, mask } => {
                    let mut da = g;
                    for (d, m) in da.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::LayerNorm {
                    input,
                    gain,
                    bias,
                    normalized,
                    inv_std,
                } => {
                    let gain_row = self.value(*gain).data();
                    let cols = g.cols();
                    let n = cols as f64;
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        let dy = g.row(r);
                        let xhat = normalized.row(r);
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            dgain.data_mut()[c] += dy[c] * xhat[c];
                            dbias.data_mut()[c] += dy[c];
                            let dxh = dy[c] * gain_row[c];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[c];
                        }
                        let k = inv_std[r] / n;
                        for c in 0..cols {
                            let dxh = dy[c] * gain_row[c];
                            dx.set(r, c, k * (n * dxh - sum_dxhat - xhat[c] * sum_dxhat_xhat));
                        }
                    }
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                    accumulate(&mut grads, *input, dx);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(&g, *q, *k, *v, *heads, probs);
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::RowSum(a) => {
                    let x = self.value(*a);
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        da.row_mut(r).fill(g.get(r, 0));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let inner: f64 = y.iter().zip(g.data()).map(|(p, d)| p * d).sum();
                    let mut da = g.clone();
                    for (d, p) in da.data_mut().iter_mut().zip(y) {
                        *d = p * (*d - inner);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows() as f64;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for (d, v) in da.row_mut(r).iter_mut().zip(g.data()) {
                            *d = v / n;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::StackRows(sources) => {
                    for (i, &(src, row)) in sources.iter().enumerate() {
                        let shape = self.value(src).shape();
                        let slot = grads[src.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1));
                        for (d, v) in slot.row_mut(row).iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Pick { input, row, col } => {
                    let (r, c) = self.value(*input).shape();
                    let mut da = Matrix::zeros(r, c);
                    da.set(*row, *col, g.get(0, 0));
                    accumulate(&mut grads, *input, da);
                }
                Op::SampledCe {
                    hidden,
                    table,
                    targets,
                    probs,
                } => {
                    let emb = &self.params[*table];
                    let h = self.value(*hidden);
                    let upstream = g.get(0, 0) / targets.len() as f64;
                    let mut dh = Matrix::zeros(h.rows(), h.cols());
                    let demb = &mut param_grads[*table];
                    for (t, p) in targets.iter().zip(probs) {
                        let hp = h.row(t.position);
                        for (ci, (&c, &pc)) in t.candidates.iter().zip(p).enumerate() {
                            let dlogit = upstream * (pc - if ci == 0 { 1.0 } else { 0.0 });
                            if dlogit == 0.0 {
                                continue;
                            }
                            for (d, e) in dh.row_mut(t.position).iter_mut().zip(emb.row(c)) {
                                *d += dlogit * e;
                            }
                            for (d, x) in demb.row_mut(c).iter_mut().zip(hp) {
                                *d += scale * dlogit * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *hidden, dh);
                }
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        g: &Matrix,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[Matrix],
    ) -> (Matrix, Matrix, Matrix) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (len, width) = qm.shape();
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut dq = Matrix::zeros(len, width);
        let mut dk = Matrix::zeros(len, width);
        let mut dv = Matrix::zeros(len, width);
        for (h, p) in probs.iter().enumerate() {
            let cols = h * head_dim..(h + 1) * head_dim;
            for i in 0..len {
                let go = &g.row(i)[cols.clone()];
                // dP_ij = dO_i . V_j, restricted to the visible prefix
                let dp: Vec<f64> = (0..=i).map(|j| dot(go, &vm.row(j)[cols.clone()])).collect();
                let inner: f64 = (0..=i).map(|j| p.get(i, j) * dp[j]).sum();
                for j in 0..=i {
                    let pij = p.get(i, j);
                    for (d, x) in dv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                        *d += pij * x;
                    }
                    let ds = pij * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in cols.clone() {
                        let dqi = ds * km.get(j, c);
                        let dkj = ds * qm.get(i, c);
                        dq.data_mut()[i * width + c] += dqi;
                        dk.data_mut()[j * width + c] += dkj;
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
