use std::collections::HashMap;

use super::kernels::{self, gemm, View};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors with gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> ParamStore<T> {
        ParamStore { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.rows, value.cols));
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds the parameter gradients recorded by `graph`.
    pub fn accumulate(&mut self, graph: &Graph<T>) {
        for (id, g) in graph.param_grads() {
            self.grads[id.0].add_assign(g);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            grads: self.grads.iter().map(|v| v.cast()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, rstd: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, groups: usize, probs: Vec<T> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    MeanRows { x: NodeId, groups: usize },
    RepeatRows { x: NodeId, times: usize },
    Sum(NodeId),
    L1(NodeId, NodeId),
    Bce { x: NodeId, labels: Vec<T>, weights: Vec<T> },
    External { x: NodeId, grad: Tensor<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires: bool,
    grad: Option<Tensor<T>>,
}

/// Tape of executed ops. Nodes are appended in execution order, which is a
/// topological order, and `backward` walks it in reverse.
#[derive(Clone, Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, NodeId>,
    freed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

fn shape_err<X>(msg: String) -> Result<X> {
    Err(Error::Shape(msg))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph { nodes: Vec::new(), params: HashMap::new(), freed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires)
    }

    fn check_live(&self) -> Result<()> {
        if self.freed {
            return Err(Error::Lifecycle("graph has been freed".into()));
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter from a store; repeated requests reuse one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, n);
        n
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|(&p, &n)| self.nodes[n.0].grad.as_ref().map(|g| (p, g)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return shape_err(format!("matmul {:?} x {:?}", va.shape(), vb.shape()));
        }
        let out = kernels::matmul(va, vb);
        let r = self.req(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), r))
    }

    /// Adds the `1×c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rows != 1 || vb.cols != vx.cols {
            return shape_err(format!("add_row {:?} + {:?}", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data.chunks_mut(vx.cols.max(1)) {
            for (o, &bv) in row.iter_mut().zip(&vb.data) {
                *o += bv;
            }
        }
        let r = self.req(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), r))
    }

    /// `x·w + b` with `w: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what} {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let r = self.req(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), r))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, &v) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= v;
        }
        let r = self.req(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), r))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.check_live()?;
        let c = T::of(c);
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v *= c);
        let r = self.req(&[x]);
        Ok(self.push(out, Op::Scale(x, c), r))
    }

    fn map(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        let out = Tensor { rows: v.rows, cols: v.cols, data: v.data.iter().map(|&e| f(e)).collect() };
        let r = self.req(&[x]);
        Ok(self.push(out, op, r))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// Per-row normalization followed by the affine `gamma ⊙ xhat + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check_live()?;
        let c = self.value(x).cols;
        if self.shape(gamma) != [1, c] || self.shape(beta) != [1, c] {
            return shape_err(format!("layer_norm affine must be [1, {c}]"));
        }
        let (xhat, rstd) = kernels::normalize_rows(self.value(x), eps);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = xhat.clone();
        for row in out.data.chunks_mut(c.max(1)) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let r = self.req(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, r))
    }

    /// Multi-head scaled dot-product attention `softmax(QKᵀ/√d_k)·V`.
    ///
    /// With `groups > 1` the rows of `q` and of `k`/`v` are split into that
    /// many equal consecutive groups and group `i` of the queries only attends
    /// to group `i` of the keys (block-diagonal attention).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, groups: usize) -> Result<NodeId> {
        self.check_live()?;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.cols != vk.cols || vk.rows != vv.rows {
            return shape_err(format!("attention q {:?} k {:?} v {:?}", vq.shape(), vk.shape(), vv.shape()));
        }
        if heads == 0 || groups == 0 || vq.cols % heads != 0 || vv.cols % heads != 0 {
            return shape_err(format!("attention: {heads} heads over widths {} / {}", vq.cols, vv.cols));
        }
        if vq.rows % groups != 0 || vk.rows % groups != 0 || vk.rows == 0 {
            return shape_err(format!("attention: {groups} groups over {} / {} rows", vq.rows, vk.rows));
        }
        let (nq, nk) = (vq.rows / groups, vk.rows / groups);
        let (dk, dv) = (vq.cols / heads, vv.cols / heads);
        let scale = T::one() / T::of(dk as f64).sqrt();
        let mut probs = vec![T::zero(); groups * heads * nq * nk];
        let mut out = Tensor::zeros(vq.rows, vv.cols);
        for g in 0..groups {
            for h in 0..heads {
                let pv = View { off: (g * heads + h) * nq * nk, rows: nq, cols: nk, rs: nk, cs: 1 };
                gemm(
                    scale,
                    &vq.data,
                    View::block(vq.cols, g * nq, nq, h * dk, dk),
                    &vk.data,
                    View::block(vk.cols, g * nk, nk, h * dk, dk).t(),
                    T::zero(),
                    &mut probs,
                    pv,
                );
                kernels::softmax_rows(&mut probs[pv.off..pv.off + nq * nk], nk);
                gemm(
                    T::one(),
                    &probs,
                    pv,
                    &vv.data,
                    View::block(vv.cols, g * nk, nk, h * dv, dv),
                    T::zero(),
                    &mut out.data,
                    View::block(vv.cols, g * nq, nq, h * dv, dv),
                );
            }
        }
        let r = self.req(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, heads, groups, probs }, r))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.check_live()?;
        let rows = xs.first().map(|&x| self.shape(x)[0]).unwrap_or(0);
        if xs.iter().any(|&x| self.shape(x)[0] != rows) {
            return shape_err("concat_cols: row counts differ".into());
        }
        let cols: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &x in xs {
            let v = self.value(x);
            for r in 0..rows {
                out.data[r * cols + c0..r * cols + c0 + v.cols].copy_from_slice(v.row(r));
            }
            c0 += v.cols;
        }
        let r = self.req(xs);
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), r))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.check_live()?;
        let cols = xs.first().map(|&x| self.shape(x)[1]).unwrap_or(0);
        if xs.iter().any(|&x| self.shape(x)[1] != cols) {
            return shape_err("concat_rows: column counts differ".into());
        }
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(&self.value(x).data);
        }
        let rows = data.len().checked_div(cols).unwrap_or(0);
        let r = self.req(xs);
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(xs.to_vec()), r))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        if start > end || end > v.rows {
            return shape_err(format!("slice_rows {start}..{end} of {}", v.rows));
        }
        let out = Tensor { rows: end - start, cols: v.cols, data: v.data[start * v.cols..end * v.cols].to_vec() };
        let r = self.req(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, r))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        if start > end || end > v.cols {
            return shape_err(format!("slice_cols {start}..{end} of {}", v.cols));
        }
        let w = end - start;
        let mut out = Tensor::zeros(v.rows, w);
        for r in 0..v.rows {
            out.data[r * w..(r + 1) * w].copy_from_slice(&v.row(r)[start..end]);
        }
        let r = self.req(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, r))
    }

    /// Mean over rows within each of `groups` equal consecutive row groups.
    pub fn mean_rows(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        if groups == 0 || !v.rows.is_multiple_of(groups) || v.rows == 0 {
            return shape_err(format!("mean_rows: {} rows into {groups} groups", v.rows));
        }
        let per = v.rows / groups;
        let inv = T::one() / T::of(per as f64);
        let mut out = Tensor::zeros(groups, v.cols);
        for r in 0..v.rows {
            let g = r / per;
            for (o, &e) in out.data[g * v.cols..(g + 1) * v.cols].iter_mut().zip(v.row(r)) {
                *o += e;
            }
        }
        out.data.iter_mut().for_each(|e| *e *= inv);
        let r = self.req(&[x]);
        Ok(self.push(out, Op::MeanRows { x, groups }, r))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&v.data);
        }
        let out = Tensor { rows: v.rows * times, cols: v.cols, data };
        let r = self.req(&[x]);
        Ok(self.push(out, Op::RepeatRows { x, times }, r))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let s = self.value(x).data.iter().copied().sum();
        let r = self.req(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), r))
    }

    /// `Σ |a − b|`.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape(a, b, "l1")?;
        let s = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| (x - y).abs()).sum();
        let r = self.req(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b), r))
    }

    /// Weighted binary cross entropy of probabilities `x` (`[n, 1]`, clamped to
    /// `[1e-7, 1 − 1e-7]`) against 0/1 labels.
    pub fn bce(&mut self, x: NodeId, labels: &[f64], weights: &[f64]) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        if v.len() != labels.len() || labels.len() != weights.len() {
            return shape_err(format!("bce: {} values, {} labels, {} weights", v.len(), labels.len(), weights.len()));
        }
        let mut s = T::zero();
        for ((&p, &y), &w) in v.data.iter().zip(labels).zip(weights) {
            s += T::of(w * kernels::bce(p.f64(), y));
        }
        let labels = labels.iter().map(|&l| T::of(l)).collect();
        let weights = weights.iter().map(|&w| T::of(w)).collect();
        let r = self.req(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Bce { x, labels, weights }, r))
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// outside the graph.
    pub fn external(&mut self, x: NodeId, value: f64, grad: Tensor<T>) -> Result<NodeId> {
        self.check_live()?;
        if grad.shape() != self.shape(x) {
            return shape_err(format!("external grad {:?} for node {:?}", grad.shape(), self.shape(x)));
        }
        let r = self.req(&[x]);
        Ok(self.push(Tensor::scalar(T::of(value)), Op::External { x, grad }, r))
    }

    /// Releases saved activations; later `backward` calls fail.
    pub fn free(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.freed = true;
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from the scalar `loss`; leaf and parameter gradients
    /// accumulate across calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_live()?;
        if loss.0 >= self.nodes.len() {
            return Err(Error::Lifecycle(format!("node {} is not part of this graph", loss.0)));
        }
        if self.shape(loss) != [1, 1] {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Leaf | Op::Param => leaf_grads.push((i, g)),
                _ => self.backprop_node(i, &g, &mut grads),
            }
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |n: NodeId| &nodes[n.0].value;
        let wants = |n: NodeId| nodes[n.0].requires;
        let mut acc = |n: NodeId, t: Tensor<T>| {
            if !nodes[n.0].requires {
                return;
            }
            match &mut grads[n.0] {
                Some(a) => a.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let zip_map = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| Tensor {
            rows: a.rows,
            cols: a.cols,
            data: g.data.iter().zip(&a.data).map(|(&gv, &av)| f(gv, av)).collect(),
        };
        match &nodes[i].op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let mut da = Tensor::zeros(va.rows, va.cols);
                    gemm(
                        T::one(),
                        &g.data,
                        View::dense(g.rows, g.cols),
                        &vb.data,
                        View::dense(vb.rows, vb.cols).t(),
                        T::zero(),
                        &mut da.data,
                        View::dense(va.rows, va.cols),
                    );
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = Tensor::zeros(vb.rows, vb.cols);
                    gemm(
                        T::one(),
                        &va.data,
                        View::dense(va.rows, va.cols).t(),
                        &g.data,
                        View::dense(g.rows, g.cols),
                        T::zero(),
                        &mut db.data,
                        View::dense(vb.rows, vb.cols),
                    );
                    acc(*b, db);
                }
            }
            Op::AddRow(x, b) => {
                if wants(*b) {
                    let mut db = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols.max(1)) {
                        for (d, &e) in db.data.iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                    acc(*b, db);
                }
                acc(*x, g.clone());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip_map(val(*b), &|gv, bv| gv * bv));
                }
                if wants(*b) {
                    acc(*b, zip_map(val(*a), &|gv, av| gv * av));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, zip_map(val(*x), &|gv, _| gv * c));
            }
            Op::Relu(x) => acc(*x, zip_map(val(*x), &|gv, xv| if xv > T::zero() { gv } else { T::zero() })),
            Op::Gelu(x) => acc(*x, zip_map(val(*x), &|gv, xv| gv * kernels::gelu_grad(xv))),
            Op::Sigmoid(x) => {
                let y = &nodes[i].value;
                acc(*x, zip_map(y, &|gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::Tanh(x) => {
                let y = &nodes[i].value;
                acc(*x, zip_map(y, &|gv, yv| gv * (T::one() - yv * yv)));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = xhat.cols;
                let gam = &val(*gamma).data;
                if wants(*gamma) || wants(*beta) {
                    let mut dg = Tensor::zeros(1, c);
                    let mut db = Tensor::zeros(1, c);
                    for r in 0..g.rows {
                        for j in 0..c {
                            let e = g.data[r * c + j];
                            dg.data[j] += e * xhat.data[r * c + j];
                            db.data[j] += e;
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if wants(*x) {
                    let inv_c = T::one() / T::of(c as f64);
                    let mut dx = Tensor::zeros(g.rows, c);
                    #[allow(clippy::needless_range_loop)]
                    for r in 0..g.rows {
                        let gr = &g.data[r * c..(r + 1) * c];
                        let xr = &xhat.data[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            m1 += d;
                            m2 += d * xr[j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            dx.data[r * c + j] = rstd[r] * (d - m1 - xr[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention { q, k, v, heads, groups, probs } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let (heads, groups) = (*heads, *groups);
                let (nq, nk) = (vq.rows / groups, vk.rows / groups);
                let (dk, dv) = (vq.cols / heads, vv.cols / heads);
                let scale = T::one() / T::of(dk as f64).sqrt();
                let mut dq = Tensor::zeros(vq.rows, vq.cols);
                let mut dkk = Tensor::zeros(vk.rows, vk.cols);
                let mut dvv = Tensor::zeros(vv.rows, vv.cols);
                let mut ds = vec![T::zero(); nq * nk];
                let dsv = View::dense(nq, nk);
                for gi in 0..groups {
                    for h in 0..heads {
                        let pv = View { off: (gi * heads + h) * nq * nk, rows: nq, cols: nk, rs: nk, cs: 1 };
                        let go = View::block(g.cols, gi * nq, nq, h * dv, dv);
                        let vblk = View::block(vv.cols, gi * nk, nk, h * dv, dv);
                        // dV = Pᵀ·dO
                        gemm(T::one(), probs, pv.t(), &g.data, go, T::one(), &mut dvv.data, vblk);
                        // dP = dO·Vᵀ
                        gemm(T::one(), &g.data, go, &vv.data, vblk.t(), T::zero(), &mut ds, dsv);
                        let p = &probs[pv.off..pv.off + nq * nk];
                        for r in 0..nq {
                            let pr = &p[r * nk..(r + 1) * nk];
                            let dr = &mut ds[r * nk..(r + 1) * nk];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pe) in dr.iter_mut().zip(pr) {
                                *d = pe * (*d - dot);
                            }
                        }
                        let qblk = View::block(vq.cols, gi * nq, nq, h * dk, dk);
                        let kblk = View::block(vk.cols, gi * nk, nk, h * dk, dk);
                        gemm(scale, &ds, dsv, &vk.data, kblk, T::one(), &mut dq.data, qblk);
                        gemm(scale, &ds, dsv.t(), &vq.data, qblk, T::one(), &mut dkk.data, kblk);
                    }
                }
                acc(*q, dq);
                acc(*k, dkk);
                acc(*v, dvv);
            }
            Op::ConcatCols(xs) => {
                let mut c0 = 0;
                for &x in xs {
                    let w = val(x).cols;
                    if wants(x) {
                        let mut d = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            d.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        acc(x, d);
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut at = 0;
                for &x in xs {
                    let n = val(x).len();
                    if wants(x) {
                        acc(x, Tensor { rows: val(x).rows, cols: val(x).cols, data: g.data[at..at + n].to_vec() });
                    }
                    at += n;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let mut d = Tensor::zeros(vx.rows, vx.cols);
                d.data[start * vx.cols..start * vx.cols + g.len()].copy_from_slice(&g.data);
                acc(*x, d);
            }
            Op::SliceCols { x, start } => {
                let vx = val(*x);
                let mut d = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    d.data[r * vx.cols + start..r * vx.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::MeanRows { x, groups } => {
                let vx = val(*x);
                let per = vx.rows / groups;
                let inv = T::one() / T::of(per as f64);
                let mut d = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let gi = r / per;
                    for (o, &e) in d.data[r * vx.cols..(r + 1) * vx.cols].iter_mut().zip(g.row(gi)) {
                        *o = e * inv;
                    }
                }
                acc(*x, d);
            }
            Op::RepeatRows { x, times } => {
                let vx = val(*x);
                let mut d = Tensor::zeros(vx.rows, vx.cols);
                for t in 0..*times {
                    for (o, &e) in d.data.iter_mut().zip(&g.data[t * vx.len()..(t + 1) * vx.len()]) {
                        *o += e;
                    }
                }
                acc(*x, d);
            }
            Op::Sum(x) => {
                let vx = val(*x);
                acc(*x, Tensor::filled(vx.rows, vx.cols, g.item()));
            }
            Op::L1(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let gs = g.item();
                let sign: Vec<T> = va
                    .data
                    .iter()
                    .zip(&vb.data)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > T::zero() {
                            gs
                        } else if d < T::zero() {
                            -gs
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if wants(*b) {
                    acc(*b, Tensor { rows: vb.rows, cols: vb.cols, data: sign.iter().map(|&s| -s).collect() });
                }
                acc(*a, Tensor { rows: va.rows, cols: va.cols, data: sign });
            }
            Op::Bce { x, labels, weights } => {
                let vx = val(*x);
                let gs = g.item();
                let (lo, hi) = (T::of(kernels::SIGMA_CLAMP), T::one() - T::of(kernels::SIGMA_CLAMP));
                let data = vx
                    .data
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .map(
                        |((&p, &y), &w)| {
                            if p < lo || p > hi {
                                T::zero()
                            } else {
                                gs * w * (-y / p + (T::one() - y) / (T::one() - p))
                            }
                        },
                    )
                    .collect();
                acc(*x, Tensor { rows: vx.rows, cols: vx.cols, data });
            }
            Op::External { x, grad } => {
                let gs = g.item();
                acc(*x, Tensor { rows: grad.rows, cols: grad.cols, data: grad.data.iter().map(|&e| e * gs).collect() });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(f).collect()).unwrap()
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(2, 3, |i| i as f64 - 2.5));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![1.0; 6]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(2, 3, |i| i as f64 - 2.5));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        let expect: Vec<f64> = g.value(x).data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data, expect);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(1, 3, |i| i as f64));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![2.0; 3]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn freed_graph_rejects_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(1, 3, |i| i as f64));
        let s = g.sum(x).unwrap();
        g.free();
        assert!(matches!(g.backward(s), Err(Error::Lifecycle(_))));
        assert!(matches!(g.sum(x), Err(Error::Lifecycle(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(2, 2, |i| i as f64));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_examples() {
        // single key: output is that value row regardless of the query
        let mut g = Graph::<f64>::new();
        let q = g.input(t(3, 4, |i| (i as f64).sin()));
        let k = g.input(t(1, 4, |i| i as f64));
        let v = g.input(t(1, 2, |i| 3.0 + i as f64));
        let o = g.attention(q, k, v, 1, 1).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(o).row(r), &[3.0, 4.0]);
        }

        // zero queries and keys: uniform weights, column means of V
        let q = g.input(Tensor::zeros(2, 4));
        let k = g.input(Tensor::zeros(5, 4));
        let v = g.input(t(5, 3, |i| (i * i) as f64));
        let o = g.attention(q, k, v, 1, 1).unwrap();
        let vv = g.value(v).clone();
        for c in 0..3 {
            let mean = (0..5).map(|r| vv.at(r, c)).sum::<f64>() / 5.0;
            assert!((g.value(o).at(0, c) - mean).abs() < 1e-12);
        }

        // saturated softmax: the query equals one key at large scale
        let keys = t(4, 2, |i| [10.0, 0.0, 0.0, 10.0, -10.0, 0.0, 0.0, -10.0][i]);
        let k = g.input(keys.clone());
        let v = g.input(t(4, 3, |i| i as f64));
        let q = g.input(Tensor::from_vec(1, 2, vec![10.0, 0.0]).unwrap());
        let o = g.attention(q, k, v, 1, 1).unwrap();
        // logit gap 100/sqrt(2) > 20
        for c in 0..3 {
            assert!((g.value(o).at(0, c) - c as f64).abs() < 1e-6);
        }
        let bad = g.input(Tensor::zeros(2, 3));
        assert!(matches!(g.attention(bad, k, v, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn grouped_attention_is_block_diagonal() {
        let mut g = Graph::<f64>::new();
        let q = g.input(t(4, 2, |i| (i as f64 * 0.3).cos()));
        let k = g.input(t(6, 2, |i| (i as f64 * 0.7).sin()));
        let v = g.input(t(6, 2, |i| i as f64));
        let joint = g.attention(q, k, v, 1, 2).unwrap();
        for gi in 0..2 {
            let qs = g.slice_rows(q, gi * 2, gi * 2 + 2).unwrap();
            let ks = g.slice_rows(k, gi * 3, gi * 3 + 3).unwrap();
            let vs = g.slice_rows(v, gi * 3, gi * 3 + 3).unwrap();
            let o = g.attention(qs, ks, vs, 1, 1).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    assert!((g.value(o).at(r, c) - g.value(joint).at(gi * 2 + r, c)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", t(2, 2, |i| i as f64)).unwrap();
        assert!(store.add("w", Tensor::zeros(1, 1)).is_err());
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        store.accumulate(&g);
        assert_eq!(store.grad(w).data, vec![2.0; 4]);
    }
}
