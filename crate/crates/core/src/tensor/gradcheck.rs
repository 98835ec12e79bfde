use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub h: f64,
    /// Lower bound on the relative-error denominator: per coordinate the
    /// error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check a random subset of this many coordinates (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-3, floor: 1.0, max_coords: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `backward()` against central differences of `f` at `x`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, &GradCheckOptions { h, ..Default::default() })
}

pub fn finite_diff_check_with<T, F>(f: F, x: &Tensor<T>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {}", opts.h)));
    }
    if !x.is_finite() {
        return Err(Error::invalid("finite-difference point is not finite"));
    }
    let eval = |t: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let out = f(&mut g, v)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g.grad(v).expect("variable leaf has a gradient");

    let n = x.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut c = sample(&mut rng, n, k).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..n).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: coords.len(),
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let step = T::lit(opts.h);
    for &i in &coords {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += step;
        minus.data_mut()[i] -= step;
        // divide by the representable step actually taken
        let width = plus.data()[i].as_f64() - minus.data()[i].as_f64();
        let numeric = (eval(plus)? - eval(minus)?) / width;
        let a = analytic.data()[i].as_f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid(format!("checked function must be scalar-valued, got shape {:?}", t.shape())));
    }
    Ok(t.item().as_f64())
}
