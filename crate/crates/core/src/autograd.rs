//! A small reverse-mode automatic differentiation tape over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node in creation order, so the
//! node list is already topologically sorted and [`Graph::backward`] simply
//! walks it in reverse. Parameter leaves borrow their tensors from a
//! parameter store; only parameters flagged trainable receive gradients.

use std::borrow::Cow;

use crate::tensor::{log_sum_exp, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    Rows(NodeId, Vec<usize>),
    PickCols(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    Normalize(NodeId),
    NegLogMarginal {
        logits: NodeId,
        targets: Vec<usize>,
        clamped: bool,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    params: &'a [Tensor],
    trainable: Option<&'a [bool]>,
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable parameter, `None` if it did not influence the output.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of any node that required one (e.g. a [`Graph::variable`]).
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

impl<'a> Graph<'a> {
    /// A graph whose parameter leaves are differentiable where `trainable[i]` holds.
    pub fn new(params: &'a [Tensor], trainable: &'a [bool]) -> Self {
        assert_eq!(params.len(), trainable.len());
        Self {
            params,
            trainable: Some(trainable),
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    /// A forward-only graph.
    pub fn inference(params: &'a [Tensor]) -> Self {
        Self {
            params,
            trainable: None,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
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
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v.data()[0]
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let trainable = self.trainable.is_some_and(|t| t[id.0]);
        let params = self.params;
        let n = self.push(Cow::Borrowed(&params[id.0]), Op::Param(id), trainable);
        self.param_nodes[id.0] = Some(n);
        n
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// A free leaf that receives a gradient, for tensors living outside the parameter store.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        let rg = self.trainable.is_some();
        self.push(Cow::Owned(value), Op::Leaf, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(v), Op::Add(a, b), rg)
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), self.value(a).cols());
        let mut v = self.value(a).clone();
        let r = r.row(0).to_vec();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(Cow::Owned(v), Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let c = self.scalar(s);
        let v = self.value(a).scale(c);
        let rg = self.rg(a) || self.rg(s);
        self.push(Cow::Owned(v), Op::ScaleBy(a, s), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        let v = Tensor::from_vec(x.rows(), x.cols(), data);
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let xh = xhat.row(i);
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = g[j] * xh[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            out.row_mut(i)
                .copy_from_slice(&crate::tensor::softmax(x.row(i)));
        }
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::Softmax(a), rg)
    }

    pub fn rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let v = self.value(a).select_rows(indices);
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Rows(a, indices.to_vec()), rg)
    }

    pub fn row(&mut self, a: NodeId, index: usize) -> NodeId {
        self.rows(a, &[index])
    }

    pub fn pick_cols(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows(), indices.len());
        for i in 0..x.rows() {
            let r = x.row(i);
            for (o, &j) in out.row_mut(i).iter_mut().zip(indices) {
                *o = r[j];
            }
        }
        let rg = self.rg(a);
        self.push(Cow::Owned(out), Op::PickCols(a, indices.to_vec()), rg)
    }

    pub fn cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let idx: Vec<usize> = (start..start + len).collect();
        self.pick_cols(a, &idx)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            let orow = out.row_mut(i);
            for p in parts {
                let v = self.nodes[p.0].value.as_ref();
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                orow[off..off + v.cols()].copy_from_slice(v.row(i));
                off += v.cols();
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            Cow::Owned(Tensor::from_vec(rows, cols, data)),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(Tensor::from_vec(1, 1, vec![s])), Op::Sum(a), rg)
    }

    /// Divides a `1 x n` row by its sum.
    pub fn normalize(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.rows(), 1);
        let s = x.sum();
        let v = x.scale(1.0 / s);
        let rg = self.rg(a);
        self.push(Cow::Owned(v), Op::Normalize(a), rg)
    }

    /// Adds scalar nodes (or any same-shape nodes).
    pub fn add_all(&mut self, terms: &[NodeId]) -> NodeId {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Marginal negative log-likelihood of a target set under `softmax(logits)`:
    /// `-log Σ_{j ∈ targets} softmax(logits)_j` for a `1 x n` row.
    ///
    /// An empty `targets` yields the constant `-log ε` for `floor = Some(ε)`
    /// (infinity without one) with zero gradient. A non-empty set is never
    /// clamped, so a badly ranked answer keeps its gradient.
    pub fn neg_log_marginal(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        floor: Option<f64>,
    ) -> NodeId {
        let z = self.value(logits);
        assert_eq!(z.rows(), 1, "neg_log_marginal expects a row");
        let row = z.row(0);
        let cap = floor.map(|f| -f.ln());
        let (loss, clamped) = if targets.is_empty() {
            (cap.unwrap_or(f64::INFINITY), true)
        } else {
            let picked: Vec<f64> = targets.iter().map(|&t| row[t]).collect();
            ((log_sum_exp(row) - log_sum_exp(&picked)).max(0.0), false)
        };
        let rg = self.rg(logits) && !clamped;
        self.push(
            Cow::Owned(Tensor::from_vec(1, 1, vec![loss])),
            Op::NegLogMarginal {
                logits,
                targets: targets.to_vec(),
                clamped,
            },
            rg,
        )
    }

    /// Reverse pass from the scalar node `output`.
    pub fn backward(&self, output: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(output).len(), 1, "backward from non-scalar");
        if self.rg(output) {
            grads[output.0] = Some(Tensor::filled(1, 1, 1.0));
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<Option<Tensor>> = (0..self.params.len()).map(|_| None).collect();
        for (pid, n) in self.param_nodes.iter().enumerate() {
            if let Some(n) = n {
                if self.nodes[n.0].requires_grad {
                    params[pid] = grads[n.0].clone();
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut acc = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in acc.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, acc);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::ScaleBy(a, s) => {
                let c = self.scalar(*s);
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.scale(c));
                }
                if self.rg(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.accumulate(grads, *s, Tensor::from_vec(1, 1, vec![d]));
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(x.rows(), x.cols(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).row(0);
                if self.rg(*gain) {
                    let mut dg = Tensor::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    let mut db = Tensor::zeros(1, cols);
                    for i in 0..rows {
                        for (o, v) in db.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(rows, cols);
                    let n = cols as f64;
                    for i in 0..rows {
                        let dxhat: Vec<f64> =
                            (0..cols).map(|j| g.get(i, j) * gv[j]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat
                            .iter()
                            .zip(xhat.row(i))
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xhat.get(i, j) * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.as_ref();
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Rows(a, indices) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::PickCols(a, indices) => {
                let src = self.value(*a);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    let gr = g.row(i).to_vec();
                    let dr = dx.row_mut(i);
                    for (c, &j) in indices.iter().enumerate() {
                        dr[j] += gr[c];
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.rg(*p) {
                        let mut d = Tensor::zeros(g.rows(), c);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        self.accumulate(grads, *p, d);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if self.rg(*p) {
                        let c = g.cols();
                        let d = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        self.accumulate(grads, *p, d);
                    }
                    off += r;
                }
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(x.rows(), x.cols(), g.data()[0]));
            }
            Op::Normalize(a) => {
                // y = x / s, dy_j/dx_k = (δ_jk - y_j) / s
                let x = self.value(*a);
                let s = x.sum();
                let y = node.value.as_ref();
                let gy: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let data = g.data().iter().map(|gj| (gj - gy) / s).collect();
                self.accumulate(grads, *a, Tensor::from_vec(1, x.cols(), data));
            }
            Op::NegLogMarginal {
                logits,
                targets,
                clamped,
            } => {
                if *clamped {
                    return;
                }
                let z = self.value(*logits).row(0);
                let p = crate::tensor::softmax(z);
                let picked: Vec<f64> = targets.iter().map(|&t| z[t]).collect();
                let q = crate::tensor::softmax(&picked);
                let mut d = p;
                for (&t, qv) in targets.iter().zip(q) {
                    d[t] -= qv;
                }
                let gs = g.data()[0];
                let data = d.into_iter().map(|v| v * gs).collect();
                self.accumulate(grads, *logits, Tensor::from_vec(1, z.len(), data));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences over every entry of every trainable parameter.
    fn check<F>(params: &mut [Tensor], build: F)
    where
        F: Fn(&mut Graph) -> NodeId,
    {
        let mask = vec![true; params.len()];
        let analytic: Vec<Option<Tensor>> = {
            let mut g = Graph::new(params, &mask);
            let out = build(&mut g);
            g.backward(out).into_params()
        };
        let eps = 1e-5;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = params[p].data()[i];
                params[p].data_mut()[i] = orig + eps;
                let up = {
                    let mut g = Graph::inference(params);
                    let o = build(&mut g);
                    g.scalar(o)
                };
                params[p].data_mut()[i] = orig - eps;
                let down = {
                    let mut g = Graph::inference(params);
                    let o = build(&mut g);
                    g.scalar(o)
                };
                params[p].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic[p].as_ref().map_or(0.0, |t| t.data()[i]);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-5,
                    "param {p} entry {i}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn rand_params(shapes: &[(usize, usize)], seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shapes
            .iter()
            .map(|&(r, c)| Tensor::randn(r, c, 0.7, &mut rng))
            .collect()
    }

    #[test]
    fn quadratic_gradient_is_two_w() {
        let params = rand_params(&[(3, 4)], 1);
        let mask = [true];
        let mut g = Graph::new(&params, &mask);
        let w = g.param(ParamId(0));
        let sq = g.matmul_t(w, w);
        // trace(W Wᵀ) = ‖W‖²: sum the diagonal by picking rows/cols.
        let mut diag = Vec::new();
        for i in 0..3 {
            let r = g.row(sq, i);
            diag.push(g.pick_cols(r, &[i]));
        }
        let total = g.add_all(&diag);
        let grads = g.backward(total);
        let gw = grads.param(ParamId(0)).unwrap();
        for (a, b) in gw.data().iter().zip(params[0].data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = rand_params(&[(2, 2)], 2);
        let mask = [true];
        let mut g = Graph::new(&params, &mask);
        let _w = g.param(ParamId(0));
        let c = g.constant(Tensor::filled(1, 1, 3.0));
        let grads = g.backward(c);
        assert!(grads.param(ParamId(0)).is_none());
    }

    #[test]
    fn layer_norm_gelu_softmax_gradients() {
        let mut params = rand_params(&[(3, 5), (1, 5), (1, 5), (5, 4)], 3);
        check(&mut params, |g| {
            let x = g.param(ParamId(0));
            let gain = g.param(ParamId(1));
            let bias = g.param(ParamId(2));
            let w = g.param(ParamId(3));
            let ln = g.layer_norm(x, gain, bias);
            let h = g.gelu(ln);
            let z = g.matmul(h, w);
            let s = g.softmax(z);
            let r = g.row(s, 1);
            let n = g.normalize(r);
            let picked = g.pick_cols(n, &[0, 2]);
            let t = g.matmul_t(picked, picked);
            g.sum(t)
        });
    }

    #[test]
    fn marginal_and_concat_gradients() {
        let mut params = rand_params(&[(2, 3), (2, 3), (1, 1)], 4);
        check(&mut params, |g| {
            let a = g.param(ParamId(0));
            let b = g.param(ParamId(1));
            let s = g.param(ParamId(2));
            let c = g.concat_cols(&[a, b]);
            let r = g.concat_rows(&[a, b]);
            let rr = g.rows(r, &[0, 3, 3]);
            let cc = g.scale_by(c, s);
            let logits = g.matmul_t(rr, r);
            let l0 = g.row(logits, 0);
            let loss = g.neg_log_marginal(l0, &[1, 2], Some(1e-9));
            let extra = g.sum(cc);
            let extra = g.scale(extra, 0.1);
            let row = g.row(cc, 1);
            let bias = g.add_row(c, row);
            let bsum = g.sum(bias);
            g.add_all(&[loss, extra, bsum])
        });
    }

    #[test]
    fn floor_only_applies_without_targets() {
        let params = vec![Tensor::from_vec(1, 2, vec![50.0, -50.0])];
        let mask = [true];
        let mut g = Graph::new(&params, &mask);
        let z = g.param(ParamId(0));
        let l = g.neg_log_marginal(z, &[1], Some(1e-9));
        assert!((g.scalar(l) - 100.0).abs() < 1e-9);
        let grads = g.backward(l);
        let d = grads.param(ParamId(0)).unwrap().data().to_vec();
        assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12);
        let mut g = Graph::new(&params, &mask);
        let z = g.param(ParamId(0));
        let l = g.neg_log_marginal(z, &[], Some(1e-9));
        assert!(g.backward(l).param(ParamId(0)).is_none());
        let mut g = Graph::inference(&params);
        let z = g.param(ParamId(0));
        let l = g.neg_log_marginal(z, &[], Some(1e-9));
        assert!((g.scalar(l) - 20.723_265_836_946_41).abs() < 1e-9);
    }
}
