use std::sync::atomic::{AtomicBool, Ordering};

use super::graph::{MatmulDims, Node, Op, Var};
use super::kernels;
use super::shape::{numel, split_at_axis};
use super::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fault injection for the verification suite's mutation smoke test.
#[doc(hidden)]
pub static BREAK_SOFTMAX_GRAD: AtomicBool = AtomicBool::new(false);

impl<T: Scalar> Graph<T> {
    /// Reverse-mode sweep from a scalar `loss`. Gradients are retained for
    /// leaves only. Calling it twice without [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("gradients already computed; call reset_grads first".into()));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward("loss is detached from every variable".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&self.nodes, node, &g, &mut grads);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    /// Gradient of the last backward pass at leaf `v`. `None` when the leaf
    /// does not require grad; zeros when it does but the loss ignores it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.backward_done || !self.requires_grad(v) || !matches!(self.nodes[v.0].op, Op::Leaf) {
            return None;
        }
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v).to_vec()),
        })
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[v.0].value.shape());
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn like<T: Scalar>(nodes: &[Node<T>], v: Var, data: Vec<T>) -> Tensor<T> {
    Tensor::from_parts(nodes[v.0].value.shape().to_vec(), data)
}

fn elementwise<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    x: Var,
    g: &Tensor<T>,
    d: impl Fn(f64, f64) -> f64,
) {
    if !nodes[x.0].requires_grad {
        return;
    }
    let xv = nodes[x.0].value.data();
    let data = g.data().iter().zip(xv).map(|(&gi, &xi)| T::lit(gi.as_f64() * d(xi.as_f64(), gi.as_f64()))).collect();
    accumulate(nodes, grads, x, like(nodes, x, data));
}

fn reduce_to<T: Scalar>(nodes: &[Node<T>], v: Var, g: &[T], g_shape: &[usize]) -> Tensor<T> {
    let target = nodes[v.0].value.shape();
    like(nodes, v, kernels::sum_to_shape(g, g_shape, target))
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let out = &node.value;
    let gs = g.shape();
    let rg = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, reduce_to(nodes, *a, g.data(), gs));
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, reduce_to(nodes, *b, g.data(), gs));
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, reduce_to(nodes, *a, g.data(), gs));
            }
            if rg(*b) {
                let neg: Vec<T> = g.data().iter().map(|&x| -x).collect();
                accumulate(nodes, grads, *b, reduce_to(nodes, *b, &neg, gs));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            if rg(*a) {
                let full = kernels::broadcast_zip(g.data(), gs, vb.data(), vb.shape(), gs, |x, y| x * y);
                accumulate(nodes, grads, *a, reduce_to(nodes, *a, &full, gs));
            }
            if rg(*b) {
                let full = kernels::broadcast_zip(g.data(), gs, va.data(), va.shape(), gs, |x, y| x * y);
                accumulate(nodes, grads, *b, reduce_to(nodes, *b, &full, gs));
            }
        }
        Op::Scale(x, s) => {
            let s = *s;
            accumulate(nodes, grads, *x, g.map(|v| v * s));
        }
        Op::AddScalar(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            let dims = MatmulDims::new(va.shape(), vb.shape()).expect("shapes validated in forward");
            let (m, k, n) = (dims.m, dims.k, dims.n);
            let gd = g.data();
            if rg(*a) {
                let mut ga = vec![T::zero(); va.numel()];
                dims.for_each_block(|ia, ib, io| {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        &gd[io * m * n..(io + 1) * m * n],
                        false,
                        &vb.data()[ib * k * n..(ib + 1) * k * n],
                        true,
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                        true,
                    )
                });
                accumulate(nodes, grads, *a, like(nodes, *a, ga));
            }
            if rg(*b) {
                let mut gb = vec![T::zero(); vb.numel()];
                dims.for_each_block(|ia, ib, io| {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &va.data()[ia * m * k..(ia + 1) * m * k],
                        true,
                        &gd[io * m * n..(io + 1) * m * n],
                        false,
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                        true,
                    )
                });
                accumulate(nodes, grads, *b, like(nodes, *b, gb));
            }
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, like(nodes, *x, g.data().to_vec())),
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, data) = kernels::permute(g.data(), gs, &inv);
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Concat(xs, axis) => {
            let (outer, _, inner) = split_at_axis(gs, *axis);
            let total = gs[*axis] * inner;
            let mut start = 0;
            for &x in xs {
                let len = nodes[x.0].value.shape()[*axis] * inner;
                if rg(x) {
                    let mut data = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        data.extend_from_slice(&g.data()[o * total + start..o * total + start + len]);
                    }
                    accumulate(nodes, grads, x, like(nodes, x, data));
                }
                start += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = nodes[x.0].value.shape();
            let (outer, ext, inner) = split_at_axis(xs, *axis);
            let len = gs[*axis];
            let mut data = vec![T::zero(); numel(xs)];
            for o in 0..outer {
                let dst = (o * ext + start) * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::GatherRows { x, index } => {
            let xs = nodes[x.0].value.shape();
            let row = numel(&xs[1..]);
            let mut data = vec![T::zero(); numel(xs)];
            for (r, &i) in index.iter().enumerate() {
                for (d, &s) in data[i * row..(i + 1) * row].iter_mut().zip(&g.data()[r * row..(r + 1) * row]) {
                    *d += s;
                }
            }
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::SumAll(x) => {
            let gv = g.item();
            let n = nodes[x.0].value.numel();
            accumulate(nodes, grads, *x, like(nodes, *x, vec![gv; n]));
        }
        Op::SumAxis(x, axis) => {
            let data = kernels::expand_axis(g.data(), nodes[x.0].value.shape(), *axis);
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = split_at_axis(gs, *axis);
            let (y, gd) = (out.data(), g.data());
            let broken = BREAK_SOFTMAX_GRAD.load(Ordering::Relaxed);
            let mut data = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| gd[base + j * inner].as_f64() * y[base + j * inner].as_f64()).sum();
                    let dot = if broken { 0.0 } else { dot };
                    for j in 0..len {
                        let p = base + j * inner;
                        data[p] = T::lit(y[p].as_f64() * (gd[p].as_f64() - dot));
                    }
                }
            }
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::LogSoftmax(x, axis) => {
            let (outer, len, inner) = split_at_axis(gs, *axis);
            let (y, gd) = (out.data(), g.data());
            let mut data = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let gsum: f64 = (0..len).map(|j| gd[base + j * inner].as_f64()).sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        data[p] = T::lit(gd[p].as_f64() - y[p].as_f64().exp() * gsum);
                    }
                }
            }
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let c = *gs.last().unwrap();
            let rows = g.numel() / c;
            let gamma_v = nodes[gamma.0].value.data();
            let gd = g.data();
            if rg(*x) {
                let mut data = vec![T::zero(); g.numel()];
                for r in 0..rows {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..c {
                        let gh = gd[r * c + j].as_f64() * gamma_v[j].as_f64();
                        m1 += gh;
                        m2 += gh * xhat[r * c + j].as_f64();
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let rs = rstd[r].as_f64();
                    for j in 0..c {
                        let gh = gd[r * c + j].as_f64() * gamma_v[j].as_f64();
                        data[r * c + j] = T::lit(rs * (gh - m1 - xhat[r * c + j].as_f64() * m2));
                    }
                }
                accumulate(nodes, grads, *x, like(nodes, *x, data));
            }
            if rg(*gamma) {
                let mut acc = vec![0.0f64; c];
                for r in 0..rows {
                    for j in 0..c {
                        acc[j] += gd[r * c + j].as_f64() * xhat[r * c + j].as_f64();
                    }
                }
                accumulate(nodes, grads, *gamma, like(nodes, *gamma, acc.into_iter().map(T::lit).collect()));
            }
            if rg(*beta) {
                let data = kernels::sum_to_shape(gd, gs, &[c]);
                accumulate(nodes, grads, *beta, like(nodes, *beta, data));
            }
        }
        Op::Gelu(x) => elementwise(nodes, grads, *x, g, |xi, _| kernels::gelu_grad(xi)),
        Op::Relu(x) => elementwise(nodes, grads, *x, g, |xi, _| if xi > 0.0 { 1.0 } else { 0.0 }),
        Op::Abs(x) => elementwise(nodes, grads, *x, g, |xi, _| {
            if xi > 0.0 {
                1.0
            } else if xi < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Exp(x) => {
            let data = g.data().iter().zip(out.data()).map(|(&gi, &yi)| gi * yi).collect();
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::Log(x) => elementwise(nodes, grads, *x, g, |xi, _| 1.0 / xi),
        Op::Softplus(x) => elementwise(nodes, grads, *x, g, |xi, _| kernels::sigmoid(xi)),
        Op::Sigmoid(x) => {
            let data = g.data().iter().zip(out.data()).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect();
            accumulate(nodes, grads, *x, like(nodes, *x, data));
        }
        Op::ClampMin(x, min) => {
            let m = min.as_f64();
            elementwise(nodes, grads, *x, g, |xi, _| if xi > m { 1.0 } else { 0.0 })
        }
        Op::Square(x) => elementwise(nodes, grads, *x, g, |xi, _| 2.0 * xi),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = g.square(x);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn independent_leaf_has_zero_grad() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::ones([2]));
        let y = g.variable(Tensor::ones([2]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn reused_node_accumulates_both_paths() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::from_f64([2], &[3.0, -1.5]).unwrap());
        let xx = g.mul(x, x).unwrap();
        let l = g.sum(xx);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0, -3.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.variable(Tensor::ones([2]));
        assert!(matches!(g.backward(x), Err(Error::Backward(_))));
        let c = g.constant(Tensor::ones([2]));
        let lc = g.sum(c);
        assert!(matches!(g.backward(lc), Err(Error::Backward(_))));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Backward(_))));
        g.reset_grads();
        g.backward(l).unwrap();
    }
}
