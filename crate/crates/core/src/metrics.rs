//! PSNR, SSIM, accuracy, AUC, and the evaluation report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Tensor<f32>, b: &Tensor<f32>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: extents {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    check_same(pred, target, "mse")?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p as f64 - t as f64).powi(2)).sum();
    Ok(s / pred.numel() as f64)
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor<f32>, target: &Tensor<f32>, data_range: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

/// Sliding sums of width `w` along every axis (valid positions only).
fn box_sums(data: Vec<f64>, shape: &[usize], w: usize) -> (Vec<f64>, Vec<usize>) {
    let mut cur = data;
    let mut shp = shape.to_vec();
    for ax in 0..shp.len() {
        let e = shp[ax];
        let outer: usize = shp[..ax].iter().product();
        let inner: usize = shp[ax + 1..].iter().product();
        let ne = e - w + 1;
        let mut next = vec![0.0; outer * ne * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| cur[(o * e + k) * inner + i];
                let mut s: f64 = (0..w).map(at).sum();
                next[(o * ne) * inner + i] = s;
                for k in 1..ne {
                    s += at(k + w - 1) - at(k - 1);
                    next[(o * ne + k) * inner + i] = s;
                }
            }
        }
        cur = next;
        shp[ax] = ne;
    }
    (cur, shp)
}

/// Mean SSIM with a uniform `window`-wide filter over every axis, population
/// statistics, and `C1 = (K1 L)²`, `C2 = (K2 L)²`.
pub fn ssim_with(pred: &Tensor<f32>, target: &Tensor<f32>, window: usize, data_range: f64) -> Result<f64> {
    check_same(pred, target, "ssim")?;
    if window == 0 || pred.shape().iter().any(|&e| e < window) {
        return Err(Error::shape(format!("ssim: extents {:?} smaller than window {window}", pred.shape())));
    }
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = target.data().iter().map(|&v| v as f64).collect();
    let shape = pred.shape();
    let n = (window as f64).powi(shape.len() as i32);
    let sum = |v: Vec<f64>| box_sums(v, shape, window).0;
    let sx = sum(x.clone());
    let sy = sum(y.clone());
    let sxx = sum(x.iter().map(|a| a * a).collect());
    let syy = sum(y.iter().map(|a| a * a).collect());
    let sxy = sum(x.iter().zip(&y).map(|(a, b)| a * b).collect());
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..sx.len() {
        let (mx, my) = (sx[i] / n, sy[i] / n);
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / sx.len() as f64)
}

pub fn ssim(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    ssim_with(pred, target, SSIM_WINDOW, 1.0)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid(format!("accuracy of {} predictions against {} labels", pred.len(), truth.len())));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC is undefined unless both classes are present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Per-sample evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub fold: usize,
    pub label: usize,
    pub predicted: usize,
    /// Probability of the positive class.
    pub score: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub samples: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub acc: f64,
    pub auc: Option<f64>,
}

/// Aggregate metrics plus a per-fold breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    /// Mean SSIM clamped to `[0, 1]` for display; per-sample values are raw.
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub ssim_percent: f64,
    pub acc: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub folds: Vec<FoldReport>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn summarize(s: &[&SampleEval]) -> Result<(f64, f64, f64, f64, f64, Option<f64>)> {
    let (pm, ps) = mean_std(&s.iter().map(|e| e.psnr).collect::<Vec<_>>());
    let (sm, ss) = mean_std(&s.iter().map(|e| e.ssim).collect::<Vec<_>>());
    let acc =
        accuracy(&s.iter().map(|e| e.predicted).collect::<Vec<_>>(), &s.iter().map(|e| e.label).collect::<Vec<_>>())?;
    let auc =
        auc(&s.iter().map(|e| e.score).collect::<Vec<_>>(), &s.iter().map(|e| e.label == 1).collect::<Vec<_>>()).ok();
    Ok((pm, ps, sm, ss, acc, auc))
}

impl EvalReport {
    pub fn from_samples(samples: &[SampleEval]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot report on zero samples"));
        }
        let all: Vec<&SampleEval> = samples.iter().collect();
        let (psnr_mean, psnr_std, sm, ssim_std, acc, auc) = summarize(&all)?;
        let mut fold_ids: Vec<usize> = samples.iter().map(|s| s.fold).collect();
        fold_ids.sort_unstable();
        fold_ids.dedup();
        let mut folds = Vec::with_capacity(fold_ids.len());
        for f in fold_ids {
            let part: Vec<&SampleEval> = samples.iter().filter(|s| s.fold == f).collect();
            let (pm, _, fsm, _, facc, fauc) = summarize(&part)?;
            folds.push(FoldReport {
                fold: f,
                samples: part.len(),
                psnr_mean: pm,
                ssim_mean: fsm.clamp(0.0, 1.0),
                acc: facc,
                auc: fauc,
            });
        }
        let ssim_mean = sm.clamp(0.0, 1.0);
        Ok(EvalReport {
            samples: samples.len(),
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            ssim_percent: 100.0 * ssim_mean,
            acc,
            auc,
            folds,
        })
    }

    /// Flat `key=value` lines: eight aggregate keys, then `fold.<k>.<key>`.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        let mut s = format!(
            "samples={}\npsnr_mean={:.6}\npsnr_std={:.6}\nssim_mean={:.6}\nssim_std={:.6}\nssim_percent={:.4}\nacc={:.6}\nauc={}\n",
            self.samples,
            self.psnr_mean,
            self.psnr_std,
            self.ssim_mean,
            self.ssim_std,
            self.ssim_percent,
            self.acc,
            opt(self.auc)
        );
        for f in &self.folds {
            let k = f.fold;
            s.push_str(&format!(
                "fold.{k}.samples={}\nfold.{k}.psnr_mean={:.6}\nfold.{k}.ssim_mean={:.6}\nfold.{k}.acc={:.6}\nfold.{k}.auc={}\n",
                f.samples,
                f.psnr_mean,
                f.ssim_mean,
                f.acc,
                opt(f.auc)
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("eval report JSON: {e}")))
    }
}
