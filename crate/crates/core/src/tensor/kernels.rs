//! Raw loops behind the graph ops. All kernels are single-threaded and run
//! in a fixed order, so results are bit-reproducible.

use super::shape::{broadcast_strides, for_each_offset, numel, split_at_axis, strides};
use crate::scalar::Scalar;

/// `c (+)= op(a) · op(b)` for one `m×n` output block, where `op` optionally
/// transposes. `a` is stored `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    if !accumulate {
        c[..m * n].fill(T::zero());
    }
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    axpy(aip, &b[p * n..(p + 1) * n], crow);
                }
            }
        }
        (true, false) => {
            // a stored k×m
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == T::zero() {
                        continue;
                    }
                    axpy(api, brow, &mut c[i * n..(i + 1) * n]);
                }
            }
        }
        (false, true) => {
            // b stored n×k
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = T::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let xc = x.chunks_exact(LANES);
    let yc = y.chunks_exact(LANES);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (xs, ys) in xc.zip(yc) {
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    let mut s = tail;
    for a in acc {
        s += a;
    }
    s
}

/// Elementwise binary op with numpy broadcasting into `out_shape`.
pub(crate) fn broadcast_zip<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n = numel(out_shape);
    if a_shape == out_shape && out_shape.ends_with(b_shape) {
        let bl = b.len();
        return (0..n).map(|i| f(a[i], b[i % bl])).collect();
    }
    if b_shape == out_shape && out_shape.ends_with(a_shape) {
        let al = a.len();
        return (0..n).map(|i| f(a[i % al], b[i])).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = Vec::with_capacity(n);
    for_each_offset(out_shape, [&sa, &sb], |[ia, ib]| out.push(f(a[ia], b[ib])));
    out
}

/// Sums a broadcast gradient back down to `target` shape (f64 accumulation).
pub(crate) fn sum_to_shape<T: Scalar>(g: &[T], g_shape: &[usize], target: &[usize]) -> Vec<T> {
    if g_shape == target {
        return g.to_vec();
    }
    let tn = numel(target);
    let mut acc = vec![0.0f64; tn];
    if g_shape.ends_with(target) {
        for (i, &x) in g.iter().enumerate() {
            acc[i % tn] += x.as_f64();
        }
    } else {
        let gs = strides(g_shape);
        let ts = broadcast_strides(target, g_shape);
        for_each_offset(g_shape, [&gs, &ts], |[ig, it]| acc[it] += g[ig].as_f64());
    }
    acc.into_iter().map(T::lit).collect()
}

pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    for_each_offset(&out_shape, [&src], |[i]| out.push(x[i]));
    (out_shape, out)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x[base + j * inner].as_f64());
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner].as_f64() - mx).exp();
                buf[j] = e;
                sum += e;
            }
            for j in 0..len {
                y[base + j * inner] = T::lit(buf[j] / sum);
            }
        }
    }
    y
}

pub(crate) fn log_softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(x[base + j * inner].as_f64());
            }
            let lse = mx + (0..len).map(|j| (x[base + j * inner].as_f64() - mx).exp()).sum::<f64>().ln();
            for j in 0..len {
                y[base + j * inner] = T::lit(x[base + j * inner].as_f64() - lse);
            }
        }
    }
    y
}

/// Sum along `axis`, removing it.
pub(crate) fn sum_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut acc = vec![0.0f64; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let row = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
            let dst = &mut acc[o * inner..(o + 1) * inner];
            for (d, &v) in dst.iter_mut().zip(row) {
                *d += v.as_f64();
            }
        }
    }
    acc.into_iter().map(T::lit).collect()
}

/// Broadcasts `g` (shape with `axis` removed) back along `axis` of extent `len`.
pub(crate) fn expand_axis<T: Scalar>(g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            out.extend_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    out
}

pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes each row of length `c` to zero mean / unit variance, then applies `gamma`, `beta`.
pub(crate) fn layer_norm<T: Scalar>(x: &[T], c: usize, gamma: &[T], beta: &[T], eps: f64) -> LayerNormOut<T> {
    let rows = x.len() / c;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..c {
            let h = (row[j].as_f64() - mean) * rs;
            xhat[r * c + j] = T::lit(h);
            y[r * c + j] = T::lit(gamma[j].as_f64() * h + beta[j].as_f64());
        }
        rstd.push(T::lit(rs));
    }
    LayerNormOut { y, xhat, rstd }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
