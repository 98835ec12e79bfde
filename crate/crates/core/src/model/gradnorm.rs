use crate::error::{Error, Result};

/// Loss weights `[w_gen, w_cls]` and the losses recorded at the first update.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskWeights {
    pub w: [f64; 2],
    pub initial_loss: Option<[f64; 2]>,
}

impl Default for TaskWeights {
    fn default() -> Self {
        TaskWeights { w: [1.0, 1.0], initial_loss: None }
    }
}

impl TaskWeights {
    pub fn sum(&self) -> f64 {
        self.w[0] + self.w[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradNormOutcome {
    /// Weights stepped; carries the weighted gradient norms `G_i = w_i ‖∇L_i‖` before the step.
    Updated { weighted_norms: [f64; 2] },
    /// The first recorded loss of some task is not positive, so training
    /// rates are undefined. Weights left unchanged.
    SkippedZeroInitialLoss,
}

/// One GradNorm step on two task weights.
///
/// `grad_norms` are the unweighted norms `‖∇L_i‖` on the shared layer and
/// `losses` the current task losses. The target for task `i` is
/// `mean(G) · r_i^alpha` with `r_i` the loss ratio `L_i / L_i(0)` relative to
/// its mean; each weight takes a step of size `lr` against the sign of the
/// gradient of `Σ|G_i - target_i|` (targets held constant), so a spike in a
/// gradient norm cannot move a weight by more than `lr`. Weights are then
/// clamped positive and rescaled so that they sum to exactly 2.
pub fn gradnorm_update(
    weights: &mut TaskWeights,
    grad_norms: [f64; 2],
    losses: [f64; 2],
    alpha: f64,
    lr: f64,
) -> Result<GradNormOutcome> {
    if grad_norms.iter().chain(&losses).any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite GradNorm input: norms {grad_norms:?}, losses {losses:?}")));
    }
    let l0 = *weights.initial_loss.get_or_insert(losses);
    if l0.iter().any(|&l| l <= 0.0) {
        weights.initial_loss = None;
        return Ok(GradNormOutcome::SkippedZeroInitialLoss);
    }
    let rate = [losses[0] / l0[0], losses[1] / l0[1]];
    let mean_rate = 0.5 * (rate[0] + rate[1]);
    let g = [weights.w[0] * grad_norms[0], weights.w[1] * grad_norms[1]];
    let g_avg = 0.5 * (g[0] + g[1]);
    let mut w = weights.w;
    for i in 0..2 {
        let r = if mean_rate > 0.0 { rate[i] / mean_rate } else { 1.0 };
        let target = g_avg * r.powf(alpha);
        let diff = g[i] - target;
        let sign = if grad_norms[i] == 0.0 {
            0.0
        } else if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        w[i] = (w[i] - lr * sign).max(1e-6);
    }
    weights.w = renormalize(w);
    Ok(GradNormOutcome::Updated { weighted_norms: g })
}

/// Rescales to sum 2, then recomputes the smaller weight as `2 - larger`.
/// The larger weight lies in `[1, 2]`, so the subtraction is exact and the
/// stored pair sums to exactly 2.
pub fn renormalize(w: [f64; 2]) -> [f64; 2] {
    let s = w[0] + w[1];
    let mut out = [2.0 * w[0] / s, 2.0 * w[1] / s];
    let (big, small) = if out[0] >= out[1] { (0, 1) } else { (1, 0) };
    out[big] = out[big].min(2.0 - 1e-12);
    out[small] = 2.0 - out[big];
    out
}
