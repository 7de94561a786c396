//! Wengert tape: every op appends a node; `backward` walks the nodes in
//! exact reverse recording order.

use std::sync::Arc;

use super::kernels::{gelu_grad, gemm_nt_acc, gemm_tn_acc};
use super::tensor::{broadcast_index_map, numel, strides, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    DivScalar(Var, T),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sum(Var),
    SumAxis(Var, usize),
    /// Gather through a per-block index map (patch unfold).
    Unfold {
        x: Var,
        map: Arc<Vec<usize>>,
    },
    /// Scatter through a per-block index map (patch fold / pixel shuffle).
    Fold {
        x: Var,
        map: Arc<Vec<usize>>,
    },
    GatherRows(Var, Vec<usize>),
    IndexAddRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    Take(Var, Vec<usize>),
    ReplaceRows {
        x: Var,
        token: Var,
        mask: Vec<bool>,
    },
    Concat(Vec<Var>),
    /// Fused loss with its local derivative precomputed in the forward pass.
    FusedLoss {
        input: Var,
        dloss: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recorded computation. Leaf gradients persist across `backward` calls
/// and accumulate until [`Tape::zero_grad`].
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients are added to
    /// whatever previous calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut local: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut sink = Sink {
                nodes: &self.nodes,
                local: &mut local,
            };
            match &node.op {
                Op::Leaf => {
                    let shape = node.value.shape().to_vec();
                    let t = Tensor::new(shape, g).expect("grad shape");
                    match &mut self.grads[i] {
                        Some(acc) => acc.accumulate(&t),
                        slot @ None => *slot = Some(t),
                    }
                }
                Op::Add(a, b) => {
                    let out = node.value.shape();
                    sink.add(*a, reduce_broadcast(&g, out, self.nodes[a.0].value.shape()));
                    sink.add(*b, reduce_broadcast(&g, out, self.nodes[b.0].value.shape()));
                }
                Op::Sub(a, b) => {
                    let out = node.value.shape();
                    sink.add(*a, reduce_broadcast(&g, out, self.nodes[a.0].value.shape()));
                    let mut gb = reduce_broadcast(&g, out, self.nodes[b.0].value.shape());
                    gb.iter_mut().for_each(|x| *x = -*x);
                    sink.add(*b, gb);
                }
                Op::Mul(a, b) => {
                    let out = node.value.shape();
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    if sink.wants(*a) {
                        let bm = expand(vb, out);
                        let prod: Vec<T> = g.iter().zip(&bm).map(|(&x, &y)| x * y).collect();
                        sink.add(*a, reduce_broadcast(&prod, out, va.shape()));
                    }
                    if sink.wants(*b) {
                        let am = expand(va, out);
                        let prod: Vec<T> = g.iter().zip(&am).map(|(&x, &y)| x * y).collect();
                        sink.add(*b, reduce_broadcast(&prod, out, vb.shape()));
                    }
                }
                Op::Scale(a, c) => {
                    sink.add(*a, g.iter().map(|&x| x * *c).collect());
                }
                Op::DivScalar(a, c) => {
                    sink.add(*a, g.iter().map(|&x| x / *c).collect());
                }
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let (ga, gb) = matmul_backward(va, vb, node.value.shape(), &g, sink.wants(*a), sink.wants(*b));
                    if let Some(ga) = ga {
                        sink.add(*a, ga);
                    }
                    if let Some(gb) = gb {
                        sink.add(*b, gb);
                    }
                }
                Op::Permute(a, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let gt = Tensor::new(node.value.shape().to_vec(), g).expect("grad shape");
                    sink.add(*a, permute_values(&gt, &inverse).into_data());
                }
                Op::Reshape(a) => sink.add(*a, g),
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let k = *node.value.shape().last().unwrap();
                    let mut gx = vec![T::zero(); y.len()];
                    for r in 0..y.len() / k {
                        let row = r * k..(r + 1) * k;
                        let dot: T = g[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in row {
                            gx[j] = y[j] * (g[j] - dot);
                        }
                    }
                    sink.add(*a, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = *node.value.shape().last().unwrap();
                    let gam = self.nodes[gamma.0].value.data();
                    let rows = g.len() / d;
                    let mut ggamma = vec![T::zero(); d];
                    let mut gbeta = vec![T::zero(); d];
                    let mut gx = vec![T::zero(); g.len()];
                    let inv_d = T::one() / T::of(d as f64);
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_gh = T::zero();
                        let mut mean_gh_xh = T::zero();
                        for j in 0..d {
                            let gh = g[off + j] * gam[j];
                            mean_gh += gh;
                            mean_gh_xh += gh * xhat[off + j];
                            ggamma[j] += g[off + j] * xhat[off + j];
                            gbeta[j] += g[off + j];
                        }
                        mean_gh = mean_gh * inv_d;
                        mean_gh_xh = mean_gh_xh * inv_d;
                        for j in 0..d {
                            let gh = g[off + j] * gam[j];
                            gx[off + j] = rstd[r] * (gh - mean_gh - xhat[off + j] * mean_gh_xh);
                        }
                    }
                    sink.add(*x, gx);
                    sink.add(*gamma, ggamma);
                    sink.add(*beta, gbeta);
                }
                Op::Gelu(a) => {
                    let xa = self.nodes[a.0].value.data();
                    sink.add(*a, g.iter().zip(xa).map(|(&gv, &x)| gv * gelu_grad(x)).collect());
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    sink.add(*a, vec![g[0]; n]);
                }
                Op::SumAxis(a, axis) => {
                    let shape = self.nodes[a.0].value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let size = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut gx = vec![T::zero(); outer * size * inner];
                    for o in 0..outer {
                        for s in 0..size {
                            for i in 0..inner {
                                gx[(o * size + s) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                    sink.add(*a, gx);
                }
                Op::Unfold { x, map } => {
                    let blk = map.len();
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..g.len() / blk {
                        for (i, &src) in map.iter().enumerate() {
                            gx[b * blk + src] += g[b * blk + i];
                        }
                    }
                    sink.add(*x, gx);
                }
                Op::Fold { x, map } => {
                    let blk = map.len();
                    let mut gx = vec![T::zero(); g.len()];
                    for b in 0..g.len() / blk {
                        for (i, &dst) in map.iter().enumerate() {
                            gx[b * blk + i] = g[b * blk + dst];
                        }
                    }
                    sink.add(*x, gx);
                }
                Op::GatherRows(a, idx) => {
                    let n = self.nodes[a.0].value.len();
                    let rows = self.nodes[a.0].value.shape()[0];
                    let w = n / rows.max(1);
                    let mut gx = vec![T::zero(); n];
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..w {
                            gx[r * w + j] += g[k * w + j];
                        }
                    }
                    sink.add(*a, gx);
                }
                Op::IndexAddRows { base, src, idx } => {
                    let n_src = self.nodes[src.0].value.len();
                    let w = if idx.is_empty() { 0 } else { n_src / idx.len() };
                    if sink.wants(*src) {
                        let mut gs = vec![T::zero(); n_src];
                        for (k, &r) in idx.iter().enumerate() {
                            gs[k * w..(k + 1) * w].copy_from_slice(&g[r * w..(r + 1) * w]);
                        }
                        sink.add(*src, gs);
                    }
                    sink.add(*base, g);
                }
                Op::Take(a, idx) => {
                    let mut gx = vec![T::zero(); self.nodes[a.0].value.len()];
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                    sink.add(*a, gx);
                }
                Op::ReplaceRows { x, token, mask } => {
                    let d = self.nodes[token.0].value.len();
                    let mut gx = g.clone();
                    let mut gt = vec![T::zero(); d];
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                gt[j] += g[r * d + j];
                                gx[r * d + j] = T::zero();
                            }
                        }
                    }
                    sink.add(*x, gx);
                    sink.add(*token, gt);
                }
                Op::Concat(parts) => {
                    let total = *node.value.shape().last().unwrap();
                    let rows = g.len() / total.max(1);
                    let mut offset = 0;
                    for p in parts {
                        let w = *self.nodes[p.0].value.shape().last().unwrap();
                        if sink.wants(*p) {
                            let mut gp = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            sink.add(*p, gp);
                        }
                        offset += w;
                    }
                }
                Op::FusedLoss { input, dloss } => {
                    sink.add(*input, dloss.iter().map(|&d| d * g[0]).collect());
                }
            }
        }
        Ok(())
    }
}

struct Sink<'a, T> {
    nodes: &'a [Node<T>],
    local: &'a mut [Option<Vec<T>>],
}

impl<T: Scalar> Sink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.local[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Sum a gradient of broadcast shape `out` back down to `input` shape.
pub(crate) fn reduce_broadcast<T: Scalar>(g: &[T], out: &[usize], input: &[usize]) -> Vec<T> {
    if out == input {
        return g.to_vec();
    }
    let n_in = numel(input);
    let mut acc = vec![T::zero(); n_in];
    if out.ends_with(input) {
        for (i, &v) in g.iter().enumerate() {
            acc[i % n_in] += v;
        }
        return acc;
    }
    let map = broadcast_index_map(input, out);
    for (i, &v) in g.iter().enumerate() {
        acc[map[i]] += v;
    }
    acc
}

/// Values of `t` broadcast to `out`.
pub(crate) fn expand<T: Scalar>(t: &Tensor<T>, out: &[usize]) -> Vec<T> {
    if t.shape() == out {
        return t.data().to_vec();
    }
    let n = t.len();
    if out.ends_with(t.shape()) {
        return (0..numel(out)).map(|i| t.data()[i % n]).collect();
    }
    broadcast_index_map(t.shape(), out)
        .into_iter()
        .map(|i| t.data()[i])
        .collect()
}

pub(crate) fn permute_values<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = t.len();
    let mut data = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        data.push(t.data()[src]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            src += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permute shape")
}

/// Batch offsets for a broadcast batched matmul.
pub(crate) struct BatchPlan {
    pub batch: usize,
    pub a_index: Vec<usize>,
    pub b_index: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn plan_matmul(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_shape = super::tensor::broadcast_shape(ab, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
    let batch = numel(&batch_shape);
    let a_index = broadcast_index_map(ab, &batch_shape);
    let b_index = broadcast_index_map(bb, &batch_shape);
    let mut out_shape = batch_shape;
    out_shape.push(m);
    out_shape.push(n);
    Ok(BatchPlan {
        batch,
        a_index,
        b_index,
        m,
        k,
        n,
        out_shape,
    })
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    _out: &[usize],
    g: &[T],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plan = plan_matmul(a.shape(), b.shape()).expect("recorded matmul");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = want_a.then(|| vec![T::zero(); a.len()]);
    let mut gb = want_b.then(|| vec![T::zero(); b.len()]);
    for bi in 0..plan.batch {
        let ao = plan.a_index[bi] * m * k;
        let bo = plan.b_index[bi] * k * n;
        let go = bi * m * n;
        let gs = &g[go..go + m * n];
        if let Some(ga) = ga.as_mut() {
            gemm_nt_acc(m, k, n, gs, &b.data()[bo..bo + k * n], &mut ga[ao..ao + m * k]);
        }
        if let Some(gb) = gb.as_mut() {
            gemm_tn_acc(m, k, n, &a.data()[ao..ao + m * k], gs, &mut gb[bo..bo + k * n]);
        }
    }
    (ga, gb)
}
