//! Tape of executed primitives and reverse-mode gradient propagation.
//!
//! Nodes are appended in execution order, so every node's inputs have a
//! smaller index than the node itself and a single reverse sweep visits
//! each node once.

use rand::Rng;

use super::ops::{self, ConvGeom, Mode};
use super::tensor::{gemm, Real, Tensor, Trans};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Conv2d { x: NodeId, k: NodeId, b: NodeId, geom: ConvGeom, cols: Vec<T> },
    MaxPool { x: NodeId, arg: Vec<u32> },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Scale { x: NodeId, factor: T },
    Reshape { x: NodeId },
    GatherRows { x: NodeId, idx: Vec<usize> },
    Mask { x: NodeId, mask: Vec<T> },
    PairDot { u: NodeId, v: NodeId, pairs: Vec<(usize, usize)> },
    GroupMax { x: NodeId, arg: Vec<usize> },
    SegmentProd { x: NodeId, offsets: Vec<usize> },
    BceMean { p: NodeId, labels: Vec<bool> },
}

/// Kind of a recorded primitive, used to address backward rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Conv2d,
    MaxPool,
    Dense,
    Relu,
    Sigmoid,
    Scale,
    Reshape,
    GatherRows,
    Mask,
    PairDot,
    GroupMax,
    SegmentProd,
    BceMean,
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Input | Op::Param(_) => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Mask { .. } => OpKind::Mask,
            Op::PairDot { .. } => OpKind::PairDot,
            Op::GroupMax { .. } => OpKind::GroupMax,
            Op::SegmentProd { .. } => OpKind::SegmentProd,
            Op::BceMean { .. } => OpKind::BceMean,
        })
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    n_params: usize,
    fault: Option<(OpKind, T)>,
}

/// Gradients of a scalar loss, one slot per registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of parameter `slot`; `None` when the loss does not depend on it.
    pub fn get(&self, slot: usize) -> Option<&Tensor<T>> {
        self.slots.get(slot).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn into_slots(self) -> Vec<Option<Tensor<T>>> {
        self.slots
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), n_params: 0, fault: None }
    }

    /// Scales the incoming gradient of every `kind` node by `factor` during
    /// [`Graph::backward`]. Exists to mutation-test the gradient checker.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input, &[])
    }

    /// A trainable leaf whose gradient is reported under `slot`.
    pub fn param(&mut self, t: Tensor<T>, slot: usize) -> NodeId {
        self.n_params = self.n_params.max(slot + 1);
        self.push(t, Op::Param(slot), &[])
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId, padding: usize) -> Result<NodeId> {
        let (y, cols, geom) = ops::conv2d_forward_cols(self.value(x), self.value(k), self.value(b), padding)?;
        Ok(self.push(y, Op::Conv2d { x, k, b, geom, cols }, &[x, k, b]))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (y, arg) = ops::maxpool2x2_forward(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, arg }, &[x]))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = ops::dense_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = ops::activation_forward(self.value(x), ops::Activation::Relu);
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = ops::activation_forward(self.value(x), ops::Activation::Sigmoid);
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let y = self.value(x).map(|v| v * factor);
        self.push(y, Op::Scale { x, factor }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    /// Row gather on the leading axis: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xs = self.value(x);
        let rows = xs.shape()[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} outside 0..{rows}")));
        }
        if idx.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        let width = xs.len() / rows;
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(xs.row(i));
        }
        let mut shape = xs.shape().to_vec();
        shape[0] = idx.len();
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(y, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Embedding lookup of several word ids from a `[V, d]` table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("embedding table must be 2-d, got {s:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Index(format!("word id {bad} outside vocabulary of {}", s[0])));
        }
        self.gather_rows(table, ids)
    }

    /// Inverted dropout; in evaluation mode no node is recorded.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask::<T, R>(self.value(x).len(), p, rng)?;
        self.apply_mask(x, mask)
    }

    /// Elementwise product with a fixed mask (a frozen dropout pattern).
    pub fn apply_mask(&mut self, x: NodeId, mask: Vec<T>) -> Result<NodeId> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::Dimension(format!("mask of {} for {} values", mask.len(), xv.len())));
        }
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let y = Tensor::new(xv.shape(), data)?;
        Ok(self.push(y, Op::Mask { x, mask }, &[x]))
    }

    /// Row dot products `out[p] = u[a_p] · v[b_p]` for `u: [R, d]`, `v: [S, d]`.
    pub fn pair_dot(&mut self, u: NodeId, v: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
        let (us, vs) = (self.value(u), self.value(v));
        if us.shape().len() != 2 || vs.shape().len() != 2 || us.shape()[1] != vs.shape()[1] {
            return Err(Error::Dimension(format!(
                "pair_dot needs [R, d] and [S, d], got {:?} and {:?}",
                us.shape(),
                vs.shape()
            )));
        }
        if pairs.is_empty() {
            return Err(Error::Dimension("pair_dot of zero pairs".into()));
        }
        let (ur, vr) = (us.shape()[0], vs.shape()[0]);
        let mut out = Vec::with_capacity(pairs.len());
        for &(a, b) in pairs {
            if a >= ur || b >= vr {
                return Err(Error::Index(format!("pair ({a}, {b}) outside {ur} x {vr}")));
            }
            out.push(us.row(a).iter().zip(vs.row(b)).map(|(&x, &y)| x * y).sum());
        }
        let y = Tensor::new(&[pairs.len()], out)?;
        Ok(self.push(y, Op::PairDot { u, v, pairs: pairs.to_vec() }, &[u, v]))
    }

    /// Maximum over consecutive groups of `group` entries (first index wins ties).
    pub fn group_max(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if group == 0 || xv.len() % group != 0 {
            return Err(Error::Dimension(format!("{} values do not split into groups of {group}", xv.len())));
        }
        let mut out = Vec::with_capacity(xv.len() / group);
        let mut arg = Vec::with_capacity(xv.len() / group);
        for (gi, chunk) in xv.data().chunks(group).enumerate() {
            let mut best = 0;
            for (i, &v) in chunk.iter().enumerate() {
                if v > chunk[best] {
                    best = i;
                }
            }
            out.push(chunk[best]);
            arg.push(gi * group + best);
        }
        let y = Tensor::new(&[out.len()], out)?;
        Ok(self.push(y, Op::GroupMax { x, arg }, &[x]))
    }

    /// Sequential product over segments `x[offsets[s]..offsets[s+1]]`.
    pub fn segment_prod(&mut self, x: NodeId, offsets: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != xv.len() || offsets.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Dimension(format!("bad segment offsets {offsets:?} for {} values", xv.len())));
        }
        let out: Vec<T> = offsets
            .windows(2)
            .map(|w| xv.data()[w[0]..w[1]].iter().fold(T::ONE, |acc, &v| acc * v))
            .collect();
        let y = Tensor::new(&[out.len()], out)?;
        Ok(self.push(y, Op::SegmentProd { x, offsets: offsets.to_vec() }, &[x]))
    }

    /// Mean binary cross-entropy of predictions in `(0, 1]` against labels.
    pub fn bce_mean(&mut self, p: NodeId, labels: &[bool]) -> Result<NodeId> {
        let loss = ops::bce_mean(self.value(p).data(), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::BceMean { p, labels: labels.to_vec() }, &[p]))
    }

    /// Propagates d(loss)/d(node) from `loss` back to every parameter leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Dimension(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.n_params).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[id].take() else { continue };
            if let Some((kind, factor)) = self.fault {
                if node.op.kind() == Some(kind) {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    match &mut slots[*slot] {
                        Some(acc) => acc.add_assign(&t),
                        s @ None => *s = Some(t),
                    }
                }
                Op::Conv2d { x, k, b, geom, cols } => {
                    let need_dx = self.nodes[x.0].requires_grad;
                    let (dx, dk, db) = ops::conv2d_backward(geom, cols, self.value(*k), &g, need_dx);
                    if let Some(dx) = dx {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    self.accumulate(&mut grads, *k, dk);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = vec![T::ZERO; self.value(*x).len()];
                    for (&a, &gv) in arg.iter().zip(&g) {
                        dx[a as usize] += gv;
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Dense { x, w, b } => {
                    let ws = self.value(*w).shape();
                    let (out_dim, in_dim) = (ws[0], ws[1]);
                    let rows = g.len() / out_dim;
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![T::ZERO; rows * in_dim];
                        gemm(rows, out_dim, in_dim, &g, Trans::No, self.value(*w).data(), Trans::No, T::ZERO, &mut dx);
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let mut dw = vec![T::ZERO; out_dim * in_dim];
                        gemm(out_dim, rows, in_dim, &g, Trans::Yes, self.value(*x).data(), Trans::No, T::ZERO, &mut dw);
                        self.accumulate(&mut grads, *w, dw);
                    }
                    let mut db = vec![T::ZERO; out_dim];
                    for row in g.chunks(out_dim) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Relu { x } => {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let dx = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &s)| gv * s * (T::ONE - s))
                        .collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Scale { x, factor } => {
                    let dx = g.iter().map(|&gv| gv * *factor).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Reshape { x } => self.accumulate(&mut grads, *x, g),
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let width = xv.len() / xv.shape()[0];
                    let mut dx = vec![T::ZERO; xv.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, &v) in dx[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *a += v;
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Mask { x, mask } => {
                    let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::PairDot { u, v, pairs } => {
                    let (uv, vv) = (self.value(*u), self.value(*v));
                    let d = uv.shape()[1];
                    let (need_u, need_v) = (self.nodes[u.0].requires_grad, self.nodes[v.0].requires_grad);
                    let mut du = vec![T::ZERO; if need_u { uv.len() } else { 0 }];
                    let mut dv = vec![T::ZERO; if need_v { vv.len() } else { 0 }];
                    for (&(a, b), &gv) in pairs.iter().zip(&g) {
                        if need_u {
                            for (t, &y) in du[a * d..(a + 1) * d].iter_mut().zip(vv.row(b)) {
                                *t += gv * y;
                            }
                        }
                        if need_v {
                            for (t, &y) in dv[b * d..(b + 1) * d].iter_mut().zip(uv.row(a)) {
                                *t += gv * y;
                            }
                        }
                    }
                    if need_u {
                        self.accumulate(&mut grads, *u, du);
                    }
                    if need_v {
                        self.accumulate(&mut grads, *v, dv);
                    }
                }
                Op::GroupMax { x, arg } => {
                    let mut dx = vec![T::ZERO; self.value(*x).len()];
                    for (&a, &gv) in arg.iter().zip(&g) {
                        dx[a] += gv;
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::SegmentProd { x, offsets } => {
                    let xv = self.value(*x).data();
                    let mut dx = vec![T::ZERO; xv.len()];
                    for (s, w) in offsets.windows(2).enumerate() {
                        let seg = &xv[w[0]..w[1]];
                        // prefix/suffix products avoid dividing by the factor
                        let mut prefix = vec![T::ONE; seg.len() + 1];
                        for i in 0..seg.len() {
                            prefix[i + 1] = prefix[i] * seg[i];
                        }
                        let mut suffix = T::ONE;
                        for i in (0..seg.len()).rev() {
                            dx[w[0] + i] = g[s] * prefix[i] * suffix;
                            suffix *= seg[i];
                        }
                    }
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::BceMean { p, labels } => {
                    let n = T::from_f64(labels.len() as f64);
                    let dx = self
                        .value(*p)
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&pv, &l)| g[0] * ops::bce_grad(pv, l) / n)
                        .collect();
                    self.accumulate(&mut grads, *p, dx);
                }
            }
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: Vec<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}
