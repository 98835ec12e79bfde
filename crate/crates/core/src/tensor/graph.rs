use std::sync::Arc;

use super::kernels;
use super::shape::{broadcast_shapes, broadcast_strides, for_each_offset, numel, split_at_axis};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, index: Arc<[usize]> },
    SumAll(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    ClampMin(Var, T),
    Square(Var),
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// The tape: every value produced during a forward pass, in creation
/// (hence topological) order. One graph lives for one training step.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) grads: Vec<Option<Tensor<T>>>,
    pub(crate) backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Copies the current value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        let rg = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Tensor::from_parts(shape, data), op, rg)
    }

    pub(crate) fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Narrow { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SumAll(x)
            | Op::SumAxis(x, _)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Abs(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softplus(x)
            | Op::Sigmoid(x)
            | Op::ClampMin(x, _)
            | Op::Square(x) => vec![*x],
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shapes(&sa, &sb)?;
        let data = kernels::broadcast_zip(self.value(a).data(), &sa, self.value(b).data(), &sb, &out, f);
        Ok(self.derived(out, data, op))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        let shape = t.shape().to_vec();
        self.derived(shape, t.into_data(), Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v + s);
        let shape = t.shape().to_vec();
        self.derived(shape, t.into_data(), Op::AddScalar(x))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = MatmulDims::new(&sa, &sb)?;
        let mut out = vec![T::zero(); numel(&dims.out_shape)];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (m, k, n) = (dims.m, dims.k, dims.n);
        dims.for_each_block(|ia, ib, io| {
            kernels::gemm(
                m,
                k,
                n,
                &av[ia * m * k..(ia + 1) * m * k],
                false,
                &bv[ib * k * n..(ib + 1) * k * n],
                false,
                &mut out[io * m * n..(io + 1) * m * n],
                false,
            )
        });
        Ok(self.derived(dims.out_shape.clone(), out, Op::MatMul(a, b)))
    }

    /// `x · w (+ b)` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let rows = numel(&xs[..xs.len() - 1]);
        let flat = self.reshape(x, vec![rows, ws[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, out_shape)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        if shape == self.shape(x) {
            return Ok(x);
        }
        let data = self.value(x).data().to_vec();
        Ok(self.derived(shape, data, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let (out_shape, data) = kernels::permute(self.value(x).data(), &shape, perm);
        Ok(self.derived(out_shape, data, Op::Permute(x, perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose_last needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(Error::shape(format!("concat: {:?} incompatible with {base:?} on axis {axis}", s)));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                data.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        Ok(self.derived(out_shape, data, Op::Concat(xs.to_vec(), axis)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}")));
        }
        let (outer, ext, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.derived(out_shape, data, Op::Narrow { x, axis, start }))
    }

    /// Splits `x` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let ext = *self.shape(x).get(axis).ok_or_else(|| Error::shape("split axis out of range"))?;
        if sizes.iter().sum::<usize>() != ext {
            return Err(Error::shape(format!("split sizes {sizes:?} do not sum to extent {ext}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Selects rows (sub-tensors along axis 0) of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index.is_empty() {
            return Err(Error::shape("gather_rows needs rank >= 1 and a non-empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::shape(format!("gather index {bad} out of range for {} rows", shape[0])));
        }
        let row = numel(&shape[1..]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index.iter() {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        Ok(self.derived(out_shape, data, Op::GatherRows { x, index }))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_f64();
        self.derived(Vec::new(), vec![T::lit(s)], Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let data = kernels::sum_axis(self.value(x).data(), &shape, axis);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.derived(out_shape, data, Op::SumAxis(x, axis)))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ext = *self.shape(x).get(axis).ok_or_else(|| Error::shape("axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::lit(1.0 / ext as f64)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let data = kernels::softmax(self.value(x).data(), &shape, axis);
        Ok(self.derived(shape, data, Op::Softmax(x, axis)))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("log_softmax axis {axis} out of range for {shape:?}")));
        }
        let data = kernels::log_softmax(self.value(x).data(), &shape, axis);
        Ok(self.derived(shape, data, Op::LogSoftmax(x, axis)))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("layer_norm on rank-0 tensor"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer_norm: gamma {:?} / beta {:?} vs channels {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let out = kernels::layer_norm(self.value(x).data(), c, self.value(gamma).data(), self.value(beta).data(), eps);
        Ok(self.derived(shape, out.y, Op::LayerNorm { x, gamma, beta, xhat: out.xhat, rstd: out.rstd }))
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x).map(|v| T::lit(f(v.as_f64())));
        let shape = t.shape().to_vec();
        self.derived(shape, t.into_data(), op)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), kernels::softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn clamp_min(&mut self, x: Var, min: T) -> Var {
        let m = min.as_f64();
        self.unary(x, Op::ClampMin(x, min), |v| v.max(m))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }
}

/// Batch bookkeeping for a broadcast matmul.
pub(crate) struct MatmulDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    out_batch: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl MatmulDims {
    pub fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let out_batch = broadcast_shapes(ba, bb)
            .map_err(|_| Error::shape(format!("matmul batch dimensions not broadcastable: {sa:?} x {sb:?}")))?;
        let a_strides = broadcast_strides(ba, &out_batch);
        let b_strides = broadcast_strides(bb, &out_batch);
        let mut out_shape = out_batch.clone();
        out_shape.extend([m, n]);
        Ok(MatmulDims { m, k, n, out_shape, out_batch, a_strides, b_strides })
    }

    /// Calls `f(a_block, b_block, out_block)` for every output matrix.
    pub fn for_each_block(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut io = 0;
        let out_strides = super::shape::strides(&self.out_batch);
        for_each_offset(&self.out_batch, [&self.a_strides, &self.b_strides, &out_strides], |[ia, ib, _]| {
            f(ia, ib, io);
            io += 1;
        });
    }
}
