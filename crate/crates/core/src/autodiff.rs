//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Leaf gradients
//! accumulate across `backward` calls until [`Graph::zero_grads`].

use std::cell::{Cell, Ref, RefCell};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, numel, ParameterStore, Tensor};

/// Deliberate gradient faults, used only as negative controls for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales the right-operand gradient of every matmul by 1.5.
    MatmulRhsGrad,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sqrt(usize),
    Square(usize),
    Relu(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax(usize),
    SumAll(usize),
    MeanAxes(usize),
    Concat(Vec<usize>, usize),
    Narrow {
        src: usize,
        axis: usize,
        start: usize,
    },
    Patch {
        src: usize,
        patch_len: usize,
        stride: usize,
    },
    Dropout(usize, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one differentiable computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<Vec<(String, usize)>>,
    fault: Cell<Fault>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, shape={:?})", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        let g = Self::default();
        g.fault.set(fault);
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that tracks gradients iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Leaf bound to a named parameter so its gradient can be written back
    /// with [`Graph::accumulate_into`]. Binding the same name twice returns
    /// the existing leaf.
    pub fn param(&self, store: &ParameterStore, name: &str) -> Result<Var<'_>> {
        if let Some(&(_, id)) = self.bindings.borrow().iter().find(|(n, _)| n == name) {
            return Ok(Var { graph: self, id });
        }
        let t = store.require(name)?;
        let mut value = Tensor::new(t.shape(), t.data().to_vec())?;
        value.set_requires_grad(t.requires_grad());
        let v = self.leaf(value);
        self.bindings.borrow_mut().push((name.to_string(), v.id));
        Ok(v)
    }

    pub fn value(&self, v: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    /// Accumulated gradient of a leaf, if any was produced.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.nodes.borrow()[v.id].value.grad().map(<[f64]>::to_vec)
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.value.zero_grad();
        }
    }

    /// Adds every bound parameter leaf's gradient into the matching store entry.
    pub fn accumulate_into(&self, store: &mut ParameterStore) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (name, id) in self.bindings.borrow().iter() {
            if let Some(g) = nodes[*id].value.grad() {
                let t = store
                    .get_mut(name)
                    .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let fault = self.fault.get();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            if matches!(nodes[id].op, Op::Leaf) {
                nodes[id].value.accumulate_grad(&g)?;
                continue;
            }
            let nodes = &*nodes;
            let node = &nodes[id];
            let out_shape = node.value.shape();
            let val = |i: usize| &nodes[i].value;
            let needs = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(*a) {
                        let ga = reduce_to(&g, out_shape, val(*a).shape(), |x, _| x);
                        add_into(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let gb = reduce_to(&g, out_shape, val(*b).shape(), |x, _| sign * x);
                        add_into(&mut grads, *b, gb);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let other = broadcast(val(*b), out_shape);
                        let ga = reduce_to(&g, out_shape, val(*a).shape(), |x, i| x * other[i]);
                        add_into(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let other = broadcast(val(*a), out_shape);
                        let gb = reduce_to(&g, out_shape, val(*b).shape(), |x, i| x * other[i]);
                        add_into(&mut grads, *b, gb);
                    }
                }
                Op::Div(a, b) => {
                    let den = broadcast(val(*b), out_shape);
                    if needs(*a) {
                        let ga = reduce_to(&g, out_shape, val(*a).shape(), |x, i| x / den[i]);
                        add_into(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let out = node.value.data();
                        let gb = reduce_to(&g, out_shape, val(*b).shape(), |x, i| -x * out[i] / den[i]);
                        add_into(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, s) => {
                    add_into(&mut grads, *a, g.iter().map(|x| x * s).collect());
                }
                Op::AddScalar(a) | Op::Reshape(a) => add_into(&mut grads, *a, g),
                Op::Sqrt(a) => {
                    let out = node.value.data();
                    let ga = g.iter().zip(out).map(|(x, y)| x * 0.5 / y).collect();
                    add_into(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let x = val(*a).data();
                    let ga = g.iter().zip(x).map(|(gi, xi)| 2.0 * gi * xi).collect();
                    add_into(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = val(*a).data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    add_into(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(val(*a), val(*b), &g, needs(*a), needs(*b));
                    if let Some(ga) = ga {
                        add_into(&mut grads, *a, ga);
                    }
                    if let Some(mut gb) = gb {
                        if fault == Fault::MatmulRhsGrad {
                            gb.iter_mut().for_each(|x| *x *= 1.5);
                        }
                        add_into(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => {
                    add_into(&mut grads, *a, transpose_last2(&g, out_shape));
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = *out_shape.last().unwrap();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    add_into(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    add_into(&mut grads, *a, vec![g[0]; val(*a).numel()]);
                }
                Op::MeanAxes(a) => {
                    let in_shape = val(*a).shape();
                    let count = (numel(in_shape) / node.value.numel()) as f64;
                    let map = offsets(out_shape, in_shape);
                    let ga = (0..numel(in_shape)).map(|i| g[map.get(i)] / count).collect();
                    add_into(&mut grads, *a, ga);
                }
                Op::Concat(parts, axis) => {
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let total = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for &p in parts {
                        let width = val(p).shape()[*axis] * inner;
                        if needs(p) {
                            let mut gp = Vec::with_capacity(outer * width);
                            for o in 0..outer {
                                let base = o * total + offset;
                                gp.extend_from_slice(&g[base..base + width]);
                            }
                            add_into(&mut grads, p, gp);
                        }
                        offset += width;
                    }
                }
                Op::Narrow { src, axis, start } => {
                    let in_shape = val(*src).shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let full = in_shape[*axis] * inner;
                    let width = out_shape[*axis] * inner;
                    let mut gs = vec![0.0; numel(in_shape)];
                    for o in 0..outer {
                        let dst = o * full + start * inner;
                        gs[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                    }
                    add_into(&mut grads, *src, gs);
                }
                Op::Patch {
                    src,
                    patch_len,
                    stride,
                } => {
                    let in_shape = val(*src).shape();
                    let len = *in_shape.last().unwrap();
                    let rows = numel(in_shape) / len;
                    let z = out_shape[out_shape.len() - 2];
                    let mut gs = vec![0.0; numel(in_shape)];
                    for r in 0..rows {
                        let gr = &g[r * z * patch_len..(r + 1) * z * patch_len];
                        let dst = &mut gs[r * len..(r + 1) * len];
                        for zi in 0..z {
                            for p in 0..*patch_len {
                                let j = (zi * stride + p).min(len - 1);
                                dst[j] += gr[zi * patch_len + p];
                            }
                        }
                    }
                    add_into(&mut grads, *src, gs);
                }
                Op::Dropout(a, mask) => {
                    let ga = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                    add_into(&mut grads, *a, ga);
                }
            }
        }
        Ok(())
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

/// NumPy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(format!("shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

/// Maps each flat index of `out_shape` to the flat index of a broadcast
/// operand with shape `in_shape`.
enum Offsets {
    Identity,
    Cyclic(usize),
    Repeat(usize),
    Table(Vec<usize>),
}

impl Offsets {
    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            Offsets::Identity => i,
            Offsets::Cyclic(n) => i % n,
            Offsets::Repeat(n) => i / n,
            Offsets::Table(t) => t[i],
        }
    }
}

fn offsets(in_shape: &[usize], out_shape: &[usize]) -> Offsets {
    let n_in = numel(in_shape);
    if in_shape == out_shape {
        return Offsets::Identity;
    }
    // Trailing-suffix operand (row vector, bias): plain modulo.
    let k = in_shape.len();
    let r = out_shape.len();
    let stripped: Vec<usize> = in_shape.iter().copied().skip_while(|&d| d == 1).collect();
    if stripped.len() <= r && out_shape[r - stripped.len()..] == stripped[..] && n_in > 0 {
        return Offsets::Cyclic(n_in);
    }
    // Leading-prefix operand with trailing singleton axes (per-block statistics).
    if k == r {
        let ones = in_shape.iter().rev().take_while(|&&d| d == 1).count();
        let lead = r - ones;
        if ones > 0 && in_shape[..lead] == out_shape[..lead] {
            return Offsets::Repeat(out_shape[lead..].iter().product());
        }
    }
    let mut strides = vec![0usize; r];
    let mut s = 1;
    for i in (0..k).rev() {
        let oi = r - k + i;
        strides[oi] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut table = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..total {
        table.push(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Offsets::Table(table)
}

fn broadcast(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    let map = offsets(t.shape(), out_shape);
    if matches!(map, Offsets::Identity) {
        return t.data().to_vec();
    }
    (0..numel(out_shape)).map(|i| t.data()[map.get(i)]).collect()
}

/// Sums `f(g[i], i)` over broadcast positions back into `in_shape`.
fn reduce_to(g: &[f64], out_shape: &[usize], in_shape: &[usize], f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    let map = offsets(in_shape, out_shape);
    let mut r = vec![0.0; numel(in_shape)];
    for (i, &x) in g.iter().enumerate() {
        r[map.get(i)] += f(x, i);
    }
    r
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Layout of a matmul: `a` is `[..., m, k]`; `b` is either a shared `[k, n]`
/// matrix or `[..., k, n]` with the same leading dimensions as `a`.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let err = || Error::dim(format!("matmul shape mismatch: {a:?} x {b:?}"));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != kb {
        return Err(err());
    }
    let batch: usize = a[..a.len() - 2].iter().product();
    if b.len() == 2 {
        Ok(MatMulDims {
            batch,
            m,
            k,
            n,
            shared_rhs: true,
        })
    } else if a[..a.len() - 2] == b[..b.len() - 2] {
        Ok(MatMulDims {
            batch,
            m,
            k,
            n,
            shared_rhs: false,
        })
    } else {
        Err(err())
    }
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("shapes validated in forward");
    let (ad, bd) = (a.data(), b.data());
    let ga = want_a.then(|| {
        let mut ga = vec![0.0; ad.len()];
        if d.shared_rhs {
            gemm(d.batch * d.m, d.n, d.k, g, false, bd, true, &mut ga, false);
        } else {
            for i in 0..d.batch {
                gemm(
                    d.m,
                    d.n,
                    d.k,
                    &g[i * d.m * d.n..(i + 1) * d.m * d.n],
                    false,
                    &bd[i * d.k * d.n..(i + 1) * d.k * d.n],
                    true,
                    &mut ga[i * d.m * d.k..(i + 1) * d.m * d.k],
                    false,
                );
            }
        }
        ga
    });
    let gb = want_b.then(|| {
        let mut gb = vec![0.0; bd.len()];
        if d.shared_rhs {
            gemm(d.k, d.batch * d.m, d.n, ad, true, g, false, &mut gb, false);
        } else {
            for i in 0..d.batch {
                gemm(
                    d.k,
                    d.m,
                    d.n,
                    &ad[i * d.m * d.k..(i + 1) * d.m * d.k],
                    true,
                    &g[i * d.m * d.n..(i + 1) * d.m * d.n],
                    false,
                    &mut gb[i * d.k * d.n..(i + 1) * d.k * d.n],
                    false,
                );
            }
        }
        gb
    });
    (ga, gb)
}

fn normalize_axis(axis: usize, rank: usize) -> Result<usize> {
    if axis < rank {
        Ok(axis)
    } else {
        Err(Error::dim(format!("axis {axis} out of range for rank {rank}")))
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Copy of the current value.
    pub fn tensor(&self) -> Tensor {
        let t = self.graph.value(*self);
        Tensor::new(t.shape(), t.data().to_vec()).expect("valid node")
    }

    pub fn item(&self) -> Result<f64> {
        self.graph.value(*self).item()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(*self)
    }

    fn needs(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    fn same_graph(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::dim("operands belong to different graphs"))
        }
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'g> {
        self.graph.push(value, op, self.needs())
    }

    fn binary_map(
        &self,
        other: &Var<'g>,
        make_op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let ma = offsets(a.shape(), &shape);
            let mb = offsets(b.shape(), &shape);
            let (ad, bd) = (a.data(), b.data());
            let data = (0..numel(&shape))
                .map(|i| f(ad[ma.get(i)], bd[mb.get(i)]))
                .collect();
            Tensor::new(&shape, data)?
        };
        let needs = self.needs() || other.needs();
        Ok(self.graph.push(value, make_op(self.id, other.id), needs))
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.graph.value(*self);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_map(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_map(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_map(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary_map(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, s), self.map(|x| x * s))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), self.map(|x| x + c))
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(Op::Sqrt(self.id), self.map(f64::sqrt))
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(Op::Square(self.id), self.map(|x| x * x))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), self.map(|x| if x > 0.0 { x } else { 0.0 }))
    }

    /// Matrix product over the last two axes. The right operand is either a
    /// shared 2-D matrix or has the same leading (batch) axes as `self`.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.same_graph(other)?;
        let value = {
            let nodes = self.graph.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let d = matmul_dims(a.shape(), b.shape())?;
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = d.n;
            let mut out = vec![0.0; numel(&shape)];
            if d.shared_rhs {
                gemm(
                    d.batch * d.m,
                    d.k,
                    d.n,
                    a.data(),
                    false,
                    b.data(),
                    false,
                    &mut out,
                    false,
                );
            } else {
                let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
                for i in 0..d.batch {
                    gemm(
                        d.m,
                        d.k,
                        d.n,
                        &a.data()[i * mk..(i + 1) * mk],
                        false,
                        &b.data()[i * kn..(i + 1) * kn],
                        false,
                        &mut out[i * mn..(i + 1) * mn],
                        false,
                    );
                }
            }
            Tensor::new(&shape, out)?
        };
        let needs = self.needs() || other.needs();
        Ok(self.graph.push(value, Op::MatMul(self.id, other.id), needs))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let value = {
            let t = self.graph.value(*self);
            let r = t.ndim();
            if r < 2 {
                return Err(Error::dim(format!(
                    "transpose needs rank >= 2, got {:?}",
                    t.shape()
                )));
            }
            let mut shape = t.shape().to_vec();
            shape.swap(r - 2, r - 1);
            Tensor::new(&shape, transpose_last2(t.data(), t.shape()))?
        };
        Ok(self.unary(Op::Transpose(self.id), value))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.graph.value(*self).reshaped(shape)?.with_requires_grad(false);
        Ok(self.unary(Op::Reshape(self.id), value))
    }

    /// Collapses every axis from `start` onwards into one (row-major order).
    pub fn flatten_from(&self, start: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        let start = normalize_axis(start, shape.len())?;
        let mut new_shape = shape[..start].to_vec();
        new_shape.push(shape[start..].iter().product());
        self.reshape(&new_shape)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let value = {
            let t = self.graph.value(*self);
            let n = t.shape().last().copied().unwrap_or(0);
            if n == 0 {
                return Err(Error::dim(format!(
                    "softmax over an empty last axis (shape {:?})",
                    t.shape()
                )));
            }
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
            Tensor::new(t.shape(), out)?
        };
        Ok(self.unary(Op::Softmax(self.id), value))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&self) -> Var<'g> {
        let s: f64 = self.graph.value(*self).data().iter().sum();
        self.unary(Op::SumAll(self.id), Tensor::scalar(s))
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&self) -> Var<'g> {
        let n = self.graph.value(*self).numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over `axes`, keeping reduced axes with size 1.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<'g>> {
        let value = {
            let t = self.graph.value(*self);
            if axes.is_empty() {
                return Err(Error::dim("empty reduction axis set"));
            }
            let mut shape = t.shape().to_vec();
            for &ax in axes {
                normalize_axis(ax, shape.len())?;
                shape[ax] = 1;
            }
            let count = (t.numel() / numel(&shape).max(1)) as f64;
            let map = offsets(&shape, t.shape());
            let mut out = vec![0.0; numel(&shape)];
            for (i, x) in t.data().iter().enumerate() {
                out[map.get(i)] += x;
            }
            out.iter_mut().for_each(|x| *x /= count);
            Tensor::new(&shape, out)?
        };
        Ok(self.unary(Op::MeanAxes(self.id), value))
    }

    /// Population mean and variance (divide by count) over `axes`.
    pub fn mean_var(&self, axes: &[usize]) -> Result<(Var<'g>, Var<'g>)> {
        let mean = self.mean_axes(axes)?;
        let var = self.sub(&mean)?.square().mean_axes(axes)?;
        Ok((mean, var))
    }

    /// Joins `parts` along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let graph = first.graph;
        let value = {
            let nodes = graph.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            let axis = normalize_axis(axis, base.len())?;
            let mut total = 0;
            for p in parts {
                first.same_graph(p)?;
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(Error::dim(format!(
                        "concat along axis {axis}: shapes {base:?} and {s:?} disagree"
                    )));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut shape = base.clone();
            shape[axis] = total;
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.id].value;
                    let w = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::new(&shape, out)?
        };
        let needs = parts.iter().any(Var::needs);
        Ok(graph.push(
            value,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            needs,
        ))
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let value = {
            let t = self.graph.value(*self);
            let axis = normalize_axis(axis, t.ndim())?;
            let dim = t.shape()[axis];
            if start + len > dim {
                return Err(Error::dim(format!(
                    "slice [{start}, {}) out of range for axis {axis} of size {dim}",
                    start + len
                )));
            }
            let outer: usize = t.shape()[..axis].iter().product();
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, out)?
        };
        Ok(self.unary(
            Op::Narrow {
                src: self.id,
                axis,
                start,
            },
            value,
        ))
    }

    /// Splits the last axis (a series of length `L`) into overlapping patches:
    /// `[..., L] -> [..., Z, patch_len]` with `Z = (L - patch_len) / stride + 2`,
    /// reading past the end as repeats of the final value.
    pub fn patch(&self, patch_len: usize, stride: usize) -> Result<Var<'g>> {
        let value = {
            let t = self.graph.value(*self);
            let len = t.shape().last().copied().unwrap_or(0);
            if patch_len == 0 || stride == 0 {
                return Err(Error::Config("patch length and stride must be positive".into()));
            }
            if len < patch_len {
                return Err(Error::InputTooShort {
                    len,
                    required: patch_len,
                });
            }
            let z = (len - patch_len) / stride + 2;
            let rows = t.numel() / len;
            let mut out = Vec::with_capacity(rows * z * patch_len);
            for row in t.data().chunks(len) {
                for zi in 0..z {
                    for p in 0..patch_len {
                        out.push(row[(zi * stride + p).min(len - 1)]);
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.pop();
            shape.extend([z, patch_len]);
            Tensor::new(&shape, out)?
        };
        Ok(self.unary(
            Op::Patch {
                src: self.id,
                patch_len,
                stride,
            },
            value,
        ))
    }

    /// Inverted dropout. Identity when `rng` is `None` (evaluation) or `p == 0`.
    pub fn dropout(&self, p: f64, rng: Option<&mut Rng>) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(*self) };
        if p == 0.0 {
            return Ok(*self);
        }
        let keep = 1.0 / (1.0 - p);
        let (value, mask) = {
            let t = self.graph.value(*self);
            let mask: Vec<f64> = (0..t.numel())
                .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
                .collect();
            let data = t.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (Tensor::new(t.shape(), data)?, mask)
        };
        Ok(self.unary(Op::Dropout(self.id, mask), value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(&b).unwrap().tensor().data(), &[3.0, 7.0]);
        let i = g.constant(Tensor::eye(2));
        assert_eq!(i.matmul(&a).unwrap().tensor().data(), a.tensor().data());
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let g = Graph::new();
        let s = g.constant(Tensor::vector(&[0.0, 0.0])).softmax().unwrap();
        assert_eq!(s.tensor().data(), &[0.5, 0.5]);
        let s = g.constant(Tensor::vector(&[0.0, 3f64.ln()])).softmax().unwrap();
        assert!((s.tensor().data()[0] - 0.25).abs() < 1e-15);
        assert!((s.tensor().data()[1] - 0.75).abs() < 1e-15);
        let s = g.constant(Tensor::vector(&[1000.0, 1000.0])).softmax().unwrap();
        assert_eq!(s.tensor().data(), &[0.5, 0.5]);
        assert!(g.constant(Tensor::zeros(&[2, 0])).softmax().is_err());
    }

    #[test]
    fn relu_values_and_slopes() {
        let g = Graph::new();
        let x = g.leaf(Tensor::vector(&[-1.0, 0.0, 2.0]).with_requires_grad(true));
        let y = x.relu();
        assert_eq!(y.tensor().data(), &[0.0, 0.0, 2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_var_population() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0, 4.0]));
        let (m, v) = x.mean_var(&[0]).unwrap();
        assert_eq!(m.item().unwrap(), 2.5);
        assert_eq!(v.item().unwrap(), 1.25);
        let (m, v) = g.constant(Tensor::vector(&[7.0])).mean_var(&[0]).unwrap();
        assert_eq!((m.item().unwrap(), v.item().unwrap()), (7.0, 0.0));
        let (_, v) = g.constant(Tensor::full(&[2, 3], 4.0)).mean_var(&[0, 1]).unwrap();
        assert_eq!(v.tensor().data(), &[0.0]);
        assert!(x.mean_axes(&[]).is_err());
    }

    #[test]
    fn backward_examples() {
        let g = Graph::new();
        let w = g.leaf(Tensor::vector(&[1.0, 2.0]).with_requires_grad(true));
        w.sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0]);
        g.zero_grads();
        w.square().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);

        let d = g.constant(Tensor::vector(&[1.0, 2.0]));
        d.mul(&w).unwrap().sum().backward().unwrap();
        assert!(d.grad().is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let w = g.leaf(Tensor::vector(&[1.0, 2.0]).with_requires_grad(true));
        let loss = w.square().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let g = Graph::new();
        let w = g.leaf(Tensor::vector(&[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(w.backward(), Err(Error::Dimension(_))));
    }

    #[test]
    fn three_op_chain_matches_hand_chain_rule() {
        // loss = sum(relu(x * w) * 3); d/dw = 3 * x * [x*w > 0]
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[2.0, -1.0, 0.5]));
        let w = g.leaf(Tensor::vector(&[1.5, 2.0, -4.0]).with_requires_grad(true));
        let loss = x.mul(&w).unwrap().relu().scale(3.0).sum();
        assert_eq!(loss.item().unwrap(), 9.0);
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcasting_add_and_grad_reduction() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]).with_requires_grad(true));
        let b = g.leaf(Tensor::vector(&[1.0, 2.0, 3.0]).with_requires_grad(true));
        let y = x.add(&b).unwrap();
        assert_eq!(y.tensor().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(x.add(&c).is_err());
    }

    #[test]
    fn broadcast_middle_axis() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        let m = x.mean_axes(&[1, 2]).unwrap();
        assert_eq!(m.shape(), vec![2, 1, 1]);
        assert_eq!(m.tensor().data(), &[1.5, 5.5]);
        let c = x.sub(&m).unwrap();
        assert_eq!(c.tensor().data(), &[-1.5, -0.5, 0.5, 1.5, -1.5, -0.5, 0.5, 1.5]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.tensor().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.narrow(1, 1, 2).unwrap().tensor().data(), b.tensor().data());
        assert!(c.narrow(1, 2, 2).is_err());
        let wrong = g.constant(Tensor::zeros(&[3, 1]));
        assert!(Var::concat(&[a, wrong], 1).is_err());
    }

    #[test]
    fn patch_op_pads_with_last_value() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&(1..=10).map(f64::from).collect::<Vec<_>>()));
        let p = x.patch(4, 2).unwrap();
        assert_eq!(p.shape(), vec![5, 4]);
        assert_eq!(
            p.tensor().data(),
            &[
                1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0, 7.0, 8.0, 7.0, 8.0, 9.0, 10.0, 9.0, 10.0,
                10.0, 10.0
            ]
        );
    }

    #[test]
    fn dropout_identity_cases() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let mut rng = Rng::new(0);
        assert_eq!(x.dropout(0.0, Some(&mut rng)).unwrap().id(), x.id());
        assert_eq!(x.dropout(0.5, None).unwrap().id(), x.id());
        let y = x.dropout(0.5, Some(&mut rng)).unwrap();
        for (a, b) in y.tensor().data().iter().zip(x.tensor().data()) {
            assert!(*a == 0.0 || *a == 2.0 * b);
        }
        assert!(x.dropout(1.0, None).is_err());
    }

    #[test]
    fn param_binding_writes_back() {
        let mut store = ParameterStore::new(0);
        store.insert("w", Tensor::vector(&[1.0, 2.0])).unwrap();
        let g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let again = g.param(&store, "w").unwrap();
        assert_eq!(w.id(), again.id());
        w.square().sum().backward().unwrap();
        g.accumulate_into(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }
}
