#![allow(dead_code)]

use dtsw_core::{Graph, Result, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.random_range(lo..hi)))
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.as_f64()).collect()
}

/// `f(x) = sum(w * op(x))` with fixed random weights `w`.
pub fn probe<T: Scalar>(
    shape_out: Vec<usize>,
    seed: u64,
    op: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
) -> impl Fn(&mut Graph<T>, Var) -> Result<Var> {
    let w: Tensor<T> = uniform(&shape_out, -1.0, 1.0, &mut rng(seed));
    move |g, x| {
        let y = op(g, x)?;
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    }
}
