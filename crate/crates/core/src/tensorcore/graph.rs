//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built eagerly: every op computes its value immediately
//! and records enough state for its backward rule. Parameters are read in
//! place from a borrowed [`ParamStore`]; [`Graph::backward`] returns the
//! gradient of a scalar node with respect to every parameter it touched.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::dot;
use super::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const PROB_EPS: f64 = 1e-12;

enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    Gather(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Tensor>,
    },
    MeanRows {
        x: NodeId,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Vec<NodeId>),
    /// Scalar loss whose local gradient w.r.t. `input` was computed forward.
    Loss { input: NodeId, local: Tensor },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Options for the fused multi-head attention op.
#[derive(Clone, Copy, Debug)]
pub struct AttentionSpec<'a> {
    pub heads: usize,
    /// Attendable key positions; `None` means all.
    pub key_mask: Option<&'a [bool]>,
    pub causal: bool,
}

impl<'p> Graph<'p> {
    /// Inference graph: dropout is the identity.
    pub fn new(store: &'p ParamStore) -> Graph<'p> {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Training graph whose dropout masks come from `seed`.
    pub fn training(store: &'p ParamStore, seed: u64) -> Graph<'p> {
        Graph {
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of an `m×n` node.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let b = self.value(row);
        assert_eq!(b.rows(), 1, "add_row expects a single row");
        assert_eq!(b.cols(), self.value(x).cols(), "add_row width mismatch");
        let mut v = self.value(x).clone();
        let cols = v.cols();
        for r in v.data_mut().chunks_mut(cols) {
            for (a, bb) in r.iter_mut().zip(b.data()) {
                *a += bb;
            }
        }
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// Inverted dropout. Identity outside training graphs or at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        if rate <= 0.0 || self.dropout_rng.is_none() {
            return x;
        }
        let keep = 1.0 - rate;
        let shape = self.value(x).shape();
        let rng = self.dropout_rng.as_mut().expect("training graph");
        let mask: Vec<f64> = (0..shape[0] * shape[1])
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(shape[0], shape[1], mask);
        let mut v = self.value(x).clone();
        for (a, m) in v.data_mut().iter_mut().zip(mask.data()) {
            *a *= m;
        }
        self.push(v, Op::MulConst(x, mask), &[x])
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < t.rows(), "gather index {i} out of range {}", t.rows());
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), cols, data);
        self.push(v, Op::Gather(table, idx.to_vec()), &[table])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let v = Tensor::from_vec(rows, cols, data);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(x).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Per-row layer normalization with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Fused scaled dot-product attention over `heads` column groups.
    /// Masked keys (and future keys when causal) get exactly zero weight.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttentionSpec<'_>) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, tk, d) = (qv.rows(), kv.rows(), qv.cols());
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.shape(), kv.shape(), "attention value shape");
        assert_eq!(d % spec.heads, 0, "width not divisible by heads");
        if let Some(m) = spec.key_mask {
            assert_eq!(m.len(), tk, "key mask length");
        }
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(tq, d);
        let mut probs = Vec::with_capacity(spec.heads);
        let mut qh = vec![0.0; dh];
        let mut scores = vec![0.0; tk];
        for h in 0..spec.heads {
            let c0 = h * dh;
            let mut p = Tensor::zeros(tq, tk);
            for i in 0..tq {
                qh.copy_from_slice(&qv.row(i)[c0..c0 + dh]);
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let allowed = spec.key_mask.map(|m| m[j]).unwrap_or(true) && (!spec.causal || j <= i);
                    if allowed {
                        *s = dot(&qh, &kv.row(j)[c0..c0 + dh]) * scale;
                        max = max.max(*s);
                    } else {
                        *s = f64::NEG_INFINITY;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = if *s == f64::NEG_INFINITY { 0.0 } else { (*s - max).exp() };
                    z += *s;
                }
                let prow = p.row_mut(i);
                for (pj, s) in prow.iter_mut().zip(&scores) {
                    *pj = s / z;
                }
                let orow = &mut out.row_mut(i)[c0..c0 + dh];
                for (j, &pij) in p.row(i).iter().enumerate() {
                    if pij == 0.0 {
                        continue;
                    }
                    for (o, &x) in orow.iter_mut().zip(&vv.row(j)[c0..c0 + dh]) {
                        *o += pij * x;
                    }
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads: spec.heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean of the rows selected by `mask`, as a `1×n` node.
    pub fn mean_rows(&mut self, x: NodeId, mask: &[bool]) -> NodeId {
        let xv = self.value(x);
        assert_eq!(mask.len(), xv.rows(), "mean_rows mask length");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "mean_rows over zero rows");
        let mut out = vec![0.0; xv.cols()];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, a) in out.iter_mut().zip(xv.row(r)) {
                *o += a;
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        self.push(
            Tensor::row_vector(out),
            Op::MeanRows {
                x,
                mask: mask.to_vec(),
                count,
            },
            &[x],
        )
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> NodeId {
        let s = parts.iter().map(|&p| self.value(p).item()).sum();
        self.push(Tensor::scalar(s), Op::Sum(parts.to_vec()), parts)
    }

    /// Masked focal binary cross-entropy over an `R×3` probability node.
    /// Rows with `mask[r] == false` contribute nothing; the sum is divided by
    /// the number of contributing rows.
    pub fn focal_bce(&mut self, probs: NodeId, labels: &[u8], mask: &[bool], alpha: [f64; 3], gamma: f64) -> NodeId {
        let (value, local) = focal_bce_forward(self.value(probs), labels, mask, alpha, gamma);
        self.push(Tensor::scalar(value), Op::Loss { input: probs, local }, &[probs])
    }

    /// Soft-label alignment: per instance, the mean of observed annotators'
    /// probabilities against the soft target under binary cross-entropy,
    /// summed over classes and averaged over instances. `probs` rows are
    /// ordered instance-major with `n_annotators` rows per instance.
    pub fn soft_alignment(&mut self, probs: NodeId, mask: &[bool], soft: &[[f64; 3]], n_annotators: usize) -> NodeId {
        let (value, local) = soft_alignment_forward(self.value(probs), mask, soft, n_annotators);
        self.push(Tensor::scalar(value), Op::Loss { input: probs, local }, &[probs])
    }

    /// Sum over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_sum(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logits row");
        let mut local = Tensor::zeros(lv.rows(), lv.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            let lrow = local.row_mut(r);
            for (l, x) in lrow.iter_mut().zip(row) {
                *l = (x - lse).exp();
            }
            lrow[t] -= 1.0;
        }
        self.push(Tensor::scalar(total), Op::Loss { input: logits, local }, &[logits])
    }

    /// `Σ x ⊙ w` for a constant `w` of the same shape as `x`.
    pub fn weighted_sum(&mut self, x: NodeId, w: Tensor) -> NodeId {
        assert_eq!(self.value(x).shape(), w.shape(), "weighted_sum shape");
        let v = dot(self.value(x).data(), w.data());
        self.push(Tensor::scalar(v), Op::Loss { input: x, local: w }, &[x])
    }

    /// Gradient of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), [1, 1], "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let mut acc = |id: NodeId, g: Tensor| {
                if !self.nodes[id.0].needs_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(a) => a.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(p) => out.accumulate_owned(*p, gy),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        acc(*a, gy.matmul_nt(bv));
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, av.matmul_tn(&gy));
                    }
                }
                Op::Add(a, b) => {
                    acc(*b, gy.clone());
                    acc(*a, gy);
                }
                Op::AddRow(x, row) => {
                    let mut gb = vec![0.0; gy.cols()];
                    for r in 0..gy.rows() {
                        for (s, g) in gb.iter_mut().zip(gy.row(r)) {
                            *s += g;
                        }
                    }
                    acc(*row, Tensor::row_vector(gb));
                    acc(*x, gy);
                }
                Op::MulConst(x, m) => {
                    let mut g = gy;
                    for (a, b) in g.data_mut().iter_mut().zip(m.data()) {
                        *a *= b;
                    }
                    acc(*x, g);
                }
                Op::Scale(x, s) => acc(*x, gy.map(|a| a * s)),
                Op::Gather(table, idx) => {
                    let tv = self.value(*table);
                    let mut g = Tensor::zeros(tv.rows(), tv.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, b) in g.row_mut(i).iter_mut().zip(gy.row(r)) {
                            *a += b;
                        }
                    }
                    acc(*table, g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.nodes[p.0].needs_grad {
                            let mut g = Tensor::zeros(gy.rows(), w);
                            for r in 0..gy.rows() {
                                g.row_mut(r).copy_from_slice(&gy.row(r)[off..off + w]);
                            }
                            acc(p, g);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    let cols = gy.cols();
                    for &p in parts {
                        let h = self.value(p).rows();
                        if self.nodes[p.0].needs_grad {
                            let g = Tensor::from_vec(h, cols, gy.data()[off * cols..(off + h) * cols].to_vec());
                            acc(p, g);
                        }
                        off += h;
                    }
                }
                Op::Reshape(x) => {
                    let s = self.value(*x).shape();
                    acc(*x, gy.reshaped(s[0], s[1]));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*gamma).data();
                    let (rows, cols) = (gy.rows(), gy.cols());
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    let mut dx = Tensor::zeros(rows, cols);
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = gy.row(r);
                        let hr = xhat.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            dgamma[c] += gr[c] * hr[c];
                            dbeta[c] += gr[c];
                            dxhat[c] = gr[c] * g[c];
                            sum_d += dxhat[c];
                            sum_dh += dxhat[c] * hr[c];
                        }
                        let k = inv_std[r] / cols as f64;
                        let dr = dx.row_mut(r);
                        for c in 0..cols {
                            dr[c] = k * (cols as f64 * dxhat[c] - sum_d - hr[c] * sum_dh);
                        }
                    }
                    acc(*gamma, Tensor::row_vector(dgamma));
                    acc(*beta, Tensor::row_vector(dbeta));
                    acc(*x, dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut g = gy;
                    for (a, &z) in g.data_mut().iter_mut().zip(xv.data()) {
                        *a *= gelu_grad(z);
                    }
                    acc(*x, g);
                }
                Op::Tanh(x) => {
                    let y = node.value.as_ref().expect("tanh value");
                    let mut g = gy;
                    for (a, &t) in g.data_mut().iter_mut().zip(y.data()) {
                        *a *= 1.0 - t * t;
                    }
                    acc(*x, g);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("sigmoid value");
                    let mut g = gy;
                    for (a, &s) in g.data_mut().iter_mut().zip(y.data()) {
                        *a *= s * (1.0 - s);
                    }
                    acc(*x, g);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (tq, tk, d) = (qv.rows(), kv.rows(), qv.cols());
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(tq, d);
                    let mut dk = Tensor::zeros(tk, d);
                    let mut dv = Tensor::zeros(tk, d);
                    let mut dp = vec![0.0; tk];
                    for (h, p) in probs.iter().enumerate() {
                        let c0 = h * dh;
                        for i in 0..tq {
                            let go = &gy.row(i)[c0..c0 + dh];
                            let prow = p.row(i);
                            let mut s = 0.0;
                            for j in 0..tk {
                                let pij = prow[j];
                                if pij == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                for (a, &b) in dv.row_mut(j)[c0..c0 + dh].iter_mut().zip(go) {
                                    *a += pij * b;
                                }
                                dp[j] = dot(go, &vv.row(j)[c0..c0 + dh]);
                                s += dp[j] * pij;
                            }
                            for j in 0..tk {
                                let pij = prow[j];
                                if pij == 0.0 {
                                    continue;
                                }
                                let ds = pij * (dp[j] - s) * scale;
                                let krow = &kv.row(j)[c0..c0 + dh];
                                for (a, &b) in dq.row_mut(i)[c0..c0 + dh].iter_mut().zip(krow) {
                                    *a += ds * b;
                                }
                                let qrow = &qv.row(i)[c0..c0 + dh];
                                for (a, &b) in dk.row_mut(j)[c0..c0 + dh].iter_mut().zip(qrow) {
                                    *a += ds * b;
                                }
                            }
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::MeanRows { x, mask, count } => {
                    let cols = gy.cols();
                    let mut g = Tensor::zeros(mask.len(), cols);
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for (a, b) in g.row_mut(r).iter_mut().zip(gy.data()) {
                            *a = b / *count as f64;
                        }
                    }
                    acc(*x, g);
                }
                Op::Sum(parts) => {
                    let s = gy.item();
                    for &p in parts {
                        acc(p, Tensor::scalar(s));
                    }
                }
                Op::Loss { input, local } => {
                    let s = gy.item();
                    acc(*input, local.map(|a| a * s));
                }
            }
        }
        out
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Value and gradient (w.r.t. the probabilities) of the masked focal BCE.
pub fn focal_bce_forward(probs: &Tensor, labels: &[u8], mask: &[bool], alpha: [f64; 3], gamma: f64) -> (f64, Tensor) {
    assert_eq!(probs.cols(), 3, "focal loss expects three classes");
    assert_eq!(labels.len(), probs.len(), "label shape");
    assert_eq!(mask.len(), probs.rows(), "mask shape");
    let n = mask.iter().filter(|&&m| m).count();
    assert!(n > 0, "focal loss over an all-masked batch");
    let mut total = 0.0;
    let mut local = Tensor::zeros(probs.rows(), 3);
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for c in 0..3 {
            let p = probs.get(r, c).clamp(PROB_EPS, 1.0 - PROB_EPS);
            let (term, grad) = if labels[r * 3 + c] != 0 {
                let w = (1.0 - p).powf(gamma);
                let dw = if gamma == 0.0 { 0.0 } else { -gamma * (1.0 - p).powf(gamma - 1.0) };
                let a = alpha[c];
                (-a * w * p.ln(), -a * (dw * p.ln() + w / p))
            } else {
                let w = p.powf(gamma);
                let dw = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
                (-w * (1.0 - p).ln(), -(dw * (1.0 - p).ln() - w / (1.0 - p)))
            };
            total += term;
            local.set(r, c, grad / n as f64);
        }
    }
    (total / n as f64, local)
}

/// Value and gradient of the soft-label alignment loss.
pub fn soft_alignment_forward(probs: &Tensor, mask: &[bool], soft: &[[f64; 3]], n_annotators: usize) -> (f64, Tensor) {
    assert_eq!(probs.cols(), 3, "alignment expects three classes");
    assert_eq!(probs.rows(), soft.len() * n_annotators, "alignment row layout");
    assert_eq!(mask.len(), probs.rows(), "mask shape");
    let b = soft.len();
    let mut total = 0.0;
    let mut local = Tensor::zeros(probs.rows(), 3);
    for (i, target) in soft.iter().enumerate() {
        let rows: Vec<usize> = (i * n_annotators..(i + 1) * n_annotators).filter(|&r| mask[r]).collect();
        assert!(!rows.is_empty(), "alignment instance without observed annotators");
        for c in 0..3 {
            let mean = rows.iter().map(|&r| probs.get(r, c)).sum::<f64>() / rows.len() as f64;
            let p = mean.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let s = target[c];
            let mut term = 0.0;
            let mut dmean = 0.0;
            if s > 0.0 {
                term -= s * p.ln();
                dmean -= s / p;
            }
            if s < 1.0 {
                term -= (1.0 - s) * (1.0 - p).ln();
                dmean += (1.0 - s) / (1.0 - p);
            }
            total += term;
            let g = dmean / (b as f64 * rows.len() as f64);
            for &r in &rows {
                local.set(r, c, g);
            }
        }
    }
    (total / b as f64, local)
}
