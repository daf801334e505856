//! Reverse-mode differentiation over an append-only tape.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass; node ids are therefore always topologically ordered.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::tensor::{check_ce_args, gemm, log_softmax_at, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors. Order of insertion is the canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Gradients indexed by parameter id; parameters unreachable from the loss
/// have no entry.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Elementwise sum; used to combine per-sample gradients.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (id, g) in other.iter() {
            match &mut self.grads[id.0] {
                Some(mine) => mine.axpy(1.0, g).expect("gradient shapes agree"),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    fn add(&mut self, id: ParamId, g: Tensor) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(mine) => mine.axpy(1.0, &g).expect("gradient shapes agree"),
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Keys/values supplied from outside the tape, e.g. a cached prefix.
#[derive(Clone, Debug)]
pub struct ConstKv {
    pub keys: Arc<Tensor>,
    pub values: Arc<Tensor>,
}

struct AttentionSaved {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    prefix: Option<ConstKv>,
    spans: Vec<(usize, usize)>,
    n_heads: usize,
    /// Softmax weights, `[head][query]` blocks laid out by `offsets`.
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    SumAll(NodeId),
    Silu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    Merge {
        parts: Vec<(NodeId, Vec<usize>)>,
    },
    Rotary {
        x: NodeId,
        positions: Vec<usize>,
        d_head: usize,
        base: f64,
    },
    Attention(Box<AttentionSaved>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        weights: Vec<f64>,
        probs: Tensor,
        count: usize,
    },
    Mse {
        pred: NodeId,
        target: Tensor,
        mask: Vec<bool>,
        count: usize,
    },
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: Value::Borrowed(self.store.get(id)),
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x [n, d] + bias [d]` broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.cols();
        if vb.len() != d {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vx.clone();
        if d > 0 {
            for row in out.data_mut().chunks_mut(d) {
                for (o, b) in row.iter_mut().zip(vb.data()) {
                    *o += b;
                }
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    /// Row-wise layer normalization with learned gain and bias of width `d`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let d = vx.cols();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.len() != d || vb.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let n = vx.rows();
        let mut xhat = vx.clone();
        let mut out = vx.clone();
        let mut rstd = Vec::with_capacity(n);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            let xh = xhat.row_mut(i);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xhat.get(i, j) * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.rows()) {
            return Err(contract(format!("embedding id {bad} outside table of {} rows", vt.rows())));
        }
        let out = vt.select_rows(ids);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(contract(format!("row {bad} outside matrix of {} rows", vx.rows())));
        }
        let out = vx.select_rows(idx);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Scatters each part's rows to the listed output rows of an `[n, d]`
    /// matrix. Every output row must be written exactly once.
    pub fn merge_rows(&mut self, n: usize, parts: Vec<(NodeId, Vec<usize>)>) -> Result<NodeId> {
        let d = parts
            .iter()
            .find(|(_, idx)| !idx.is_empty())
            .map_or(0, |(p, _)| self.value(*p).cols());
        let mut out = Tensor::zeros(&[n, d]);
        let mut seen = vec![false; n];
        for (p, idx) in &parts {
            let vp = self.value(*p);
            if vp.rows() != idx.len() || (!idx.is_empty() && vp.cols() != d) {
                return Err(Error::Shape {
                    op: "merge_rows",
                    lhs: vec![idx.len(), d],
                    rhs: vp.shape().to_vec(),
                });
            }
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= n || seen[dst] {
                    return Err(contract(format!("merge target row {dst} invalid or duplicated")));
                }
                seen[dst] = true;
                out.row_mut(dst).copy_from_slice(vp.row(r));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(contract("merge_rows leaves output rows unwritten"));
        }
        Ok(self.push(out, Op::Merge { parts }))
    }

    /// Rotary position embedding applied per head on consecutive pairs.
    pub fn rotary(&mut self, x: NodeId, positions: &[usize], d_head: usize, base: f64) -> Result<NodeId> {
        let vx = self.value(x);
        if positions.len() != vx.rows() || d_head % 2 != 0 || vx.cols() % d_head != 0 {
            return Err(Error::Shape {
                op: "rotary",
                lhs: vx.shape().to_vec(),
                rhs: vec![positions.len(), d_head],
            });
        }
        let mut out = vx.clone();
        rotate_rows(&mut out, positions, d_head, base, 1.0);
        Ok(self.push(
            out,
            Op::Rotary {
                x,
                positions: positions.to_vec(),
                d_head,
                base,
            },
        ))
    }

    /// Multi-head scaled dot-product attention. Query `i` attends keys in the
    /// half-open span `spans[i]` of the key index space, which is the optional
    /// constant `prefix` followed by the rows of `k`/`v`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prefix: Option<ConstKv>,
        spans: Vec<(usize, usize)>,
        n_heads: usize,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let nq = vq.rows();
        let dm = vq.cols();
        let plen = prefix.as_ref().map_or(0, |p| p.keys.rows());
        if vk.shape() != vq.shape() || vv.shape() != vq.shape() || spans.len() != nq || dm % n_heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: vq.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        if let Some(p) = &prefix {
            if p.keys.cols() != dm || p.values.shape() != p.keys.shape() {
                return Err(Error::Shape {
                    op: "attention prefix",
                    lhs: vq.shape().to_vec(),
                    rhs: p.keys.shape().to_vec(),
                });
            }
        }
        let nk = plen + nq;
        if let Some((i, _)) = spans.iter().enumerate().find(|(_, &(lo, hi))| lo >= hi || hi > nk) {
            return Err(contract(format!("query {i} has an empty or out-of-range key span")));
        }
        let dh = dm / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut offsets = Vec::with_capacity(nq + 1);
        offsets.push(0);
        for &(lo, hi) in &spans {
            offsets.push(offsets.last().unwrap() + (hi - lo));
        }
        let per_head = *offsets.last().unwrap();
        let mut probs = vec![0.0; per_head * n_heads];
        let mut out = Tensor::zeros(&[nq, dm]);
        let key_row = |j: usize| -> &[f64] {
            if j < plen {
                prefix.as_ref().unwrap().keys.row(j)
            } else {
                vk.row(j - plen)
            }
        };
        let val_row = |j: usize| -> &[f64] {
            if j < plen {
                prefix.as_ref().unwrap().values.row(j)
            } else {
                vv.row(j - plen)
            }
        };
        for h in 0..n_heads {
            let cs = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let (lo, hi) = spans[i];
                let qi = &vq.row(i)[cs.clone()];
                let p = &mut probs[h * per_head + offsets[i]..h * per_head + offsets[i + 1]];
                for (s, j) in p.iter_mut().zip(lo..hi) {
                    *s = scale * dot(qi, &key_row(j)[cs.clone()]);
                }
                softmax_in_place(p);
                let o = &mut out.row_mut(i)[cs.clone()];
                for (&w, j) in p.iter().zip(lo..hi) {
                    for (oo, vvv) in o.iter_mut().zip(&val_row(j)[cs.clone()]) {
                        *oo += w * vvv;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                prefix,
                spans,
                n_heads,
                probs,
                offsets,
            })),
        ))
    }

    /// Graph version of [`crate::tensor::masked_cross_entropy`].
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
        weights: &[f64],
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        check_ce_args(vl, targets, mask, weights)?;
        let mut probs = Tensor::zeros(vl.shape());
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..vl.rows() {
            if mask[i] {
                total -= weights[i] * log_softmax_at(vl.row(i), targets[i]);
                let pr = probs.row_mut(i);
                pr.copy_from_slice(vl.row(i));
                softmax_in_place(pr);
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                weights: weights.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Graph version of [`crate::tensor::masked_mse`]; `target` is constant.
    pub fn masked_mse(&mut self, pred: NodeId, target: &Tensor, mask: &[bool]) -> Result<NodeId> {
        let value = crate::tensor::masked_mse(self.value(pred), target, mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mse {
                pred,
                target: target.clone(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Exact reverse-mode gradients of the scalar `loss` with respect to
    /// every parameter leaf reachable from it.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let mut send = |id: NodeId, t: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => acc.axpy(1.0, &t).expect("gradient shapes agree"),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[idx].op {
            Op::Constant => {}
            Op::Param(pid) => out.add(*pid, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut da = Tensor::zeros(va.shape());
                gemm(m, n, k, g.data(), false, vb.data(), true, da.data_mut(), false);
                let mut db = Tensor::zeros(vb.shape());
                gemm(k, m, n, va.data(), true, g.data(), false, db.data_mut(), false);
                send(*a, da);
                send(*b, db);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = Tensor::new(g.shape().to_vec(), g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect())?;
                let db = Tensor::new(g.shape().to_vec(), g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect())?;
                send(*a, da);
                send(*b, db);
            }
            Op::AddRow(x, bias) => {
                let vb = self.value(*bias);
                let d = vb.len();
                let mut db = vec![0.0; d];
                if d > 0 {
                    for row in g.data().chunks(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                send(*bias, Tensor::new(vb.shape().to_vec(), db)?);
                send(*x, g);
            }
            Op::Scale(x, s) => send(*x, g.scale(*s)),
            Op::SumAll(x) => {
                let vx = self.value(*x);
                send(*x, Tensor::full(vx.shape(), g.item()));
            }
            Op::Silu(x) => {
                let vx = self.value(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| {
                        let s = sigmoid(v);
                        gg * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                send(*x, Tensor::new(vx.shape().to_vec(), data)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let vg = self.value(*gain);
                let d = xhat.cols();
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = Tensor::zeros(xhat.shape());
                let mut dxhat = vec![0.0; d];
                for i in 0..xhat.rows() {
                    let gr = g.row(i);
                    let xh = xhat.row(i);
                    for j in 0..d {
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                        dxhat[j] = gr[j] * vg.data()[j];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let r = rstd[i];
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
                send(*gain, Tensor::new(vg.shape().to_vec(), dgain)?);
                send(*bias, Tensor::new(self.value(*bias).shape().to_vec(), dbias)?);
                send(*x, dx);
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let mut dt = Tensor::zeros(vt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                send(*table, dt);
            }
            Op::GatherRows { x, idx: rows } => {
                let vx = self.value(*x);
                let mut dx = Tensor::zeros(vx.shape());
                for (r, &src) in rows.iter().enumerate() {
                    for (acc, v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                send(*x, dx);
            }
            Op::Merge { parts } => {
                for (p, rows) in parts {
                    if rows.is_empty() {
                        continue;
                    }
                    send(*p, g.select_rows(rows));
                }
            }
            Op::Rotary {
                x,
                positions,
                d_head,
                base,
            } => {
                let mut dx = g;
                rotate_rows(&mut dx, positions, *d_head, *base, -1.0);
                send(*x, dx);
            }
            Op::Attention(saved) => {
                let (dq, dk, dv) = self.attention_backward(saved, &g);
                send(saved.q, dq);
                send(saved.k, dk);
                send(saved.v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                weights,
                probs,
                count,
            } => {
                let mut dl = Tensor::zeros(probs.shape());
                if *count > 0 {
                    let coef = g.item() / *count as f64;
                    for i in 0..probs.rows() {
                        if !mask[i] {
                            continue;
                        }
                        let w = coef * weights[i];
                        let row = dl.row_mut(i);
                        for (o, p) in row.iter_mut().zip(probs.row(i)) {
                            *o = w * p;
                        }
                        row[targets[i]] -= w;
                    }
                }
                send(*logits, dl);
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let vp = self.value(*pred);
                let mut dp = Tensor::zeros(vp.shape());
                if *count > 0 {
                    let coef = 2.0 * g.item() / *count as f64;
                    for i in 0..vp.rows() {
                        if !mask[i] {
                            continue;
                        }
                        let (pr, tr) = (vp.row(i), target.row(i));
                        for (j, o) in dp.row_mut(i).iter_mut().enumerate() {
                            *o = coef * (pr[j] - tr[j]);
                        }
                    }
                }
                send(*pred, dp);
            }
        }
        Ok(())
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (vq, vk, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let nq = vq.rows();
        let dm = vq.cols();
        let dh = dm / s.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let plen = s.prefix.as_ref().map_or(0, |p| p.keys.rows());
        let per_head = *s.offsets.last().unwrap();
        let mut dq = Tensor::zeros(vq.shape());
        let mut dk = Tensor::zeros(vk.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let key_row = |j: usize| -> &[f64] {
            if j < plen {
                s.prefix.as_ref().unwrap().keys.row(j)
            } else {
                vk.row(j - plen)
            }
        };
        let val_row = |j: usize| -> &[f64] {
            if j < plen {
                s.prefix.as_ref().unwrap().values.row(j)
            } else {
                vv.row(j - plen)
            }
        };
        let mut dp = Vec::new();
        for h in 0..s.n_heads {
            let cs = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let (lo, hi) = s.spans[i];
                let p = &s.probs[h * per_head + s.offsets[i]..h * per_head + s.offsets[i + 1]];
                let gi = &g.row(i)[cs.clone()];
                dp.clear();
                dp.extend((lo..hi).map(|j| dot(gi, &val_row(j)[cs.clone()])));
                let centre: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi: Vec<f64> = vq.row(i)[cs.clone()].to_vec();
                for (n, j) in (lo..hi).enumerate() {
                    let ds = p[n] * (dp[n] - centre) * scale;
                    {
                        let dqi = &mut dq.row_mut(i)[cs.clone()];
                        for (o, kk) in dqi.iter_mut().zip(&key_row(j)[cs.clone()]) {
                            *o += ds * kk;
                        }
                    }
                    if j >= plen {
                        let dkj = &mut dk.row_mut(j - plen)[cs.clone()];
                        for (o, qq) in dkj.iter_mut().zip(&qi) {
                            *o += ds * qq;
                        }
                        let dvj = &mut dv.row_mut(j - plen)[cs.clone()];
                        for (o, gg) in dvj.iter_mut().zip(gi) {
                            *o += p[n] * gg;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rotates consecutive pairs within each head by `sign * pos * theta_m`.
fn rotate_rows(x: &mut Tensor, positions: &[usize], d_head: usize, base: f64, sign: f64) {
    let dm = x.cols();
    let half = d_head / 2;
    let thetas: Vec<f64> = (0..half).map(|m| base.powf(-((2 * m) as f64) / d_head as f64)).collect();
    for (i, &pos) in positions.iter().enumerate() {
        let row = x.row_mut(i);
        for (m, th) in thetas.iter().enumerate() {
            let (sin, cos) = (sign * pos as f64 * th).sin_cos();
            for h in 0..dm / d_head {
                let a = h * d_head + 2 * m;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}
