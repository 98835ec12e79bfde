use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Scalar loss nodes of one generator step.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    /// `w_gen · gen + w_cls · cls`
    pub total: Var,
    /// `l1 + λ · adv`
    pub gen: Var,
    pub cls: Var,
    pub l1: Var,
    pub adv: Option<Var>,
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(format!("prediction {:?} vs target {:?}", g.shape(pred), g.shape(target))));
    }
    let d = g.sub(pred, target)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Non-saturating generator term `mean(softplus(-D(pred)))`.
pub fn adversarial_loss<T: Scalar>(g: &mut Graph<T>, fake_logits: Var) -> Var {
    let n = g.scale(fake_logits, -T::one());
    let s = g.softplus(n);
    g.mean(s)
}

/// `mean|pred - target| + λ · adv`; returns `(gen, l1, adv)`.
pub fn generation_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    fake_logits: Option<Var>,
    adv_weight: f64,
) -> Result<(Var, Var, Option<Var>)> {
    let l1 = l1_loss(g, pred, target)?;
    match fake_logits {
        Some(d) if adv_weight > 0.0 => {
            let adv = adversarial_loss(g, d);
            let w = g.scale(adv, T::lit(adv_weight));
            Ok((g.add(l1, w)?, l1, Some(adv)))
        }
        _ => Ok((l1, l1, None)),
    }
}

/// Mean over the batch of `-log p(true class)`, with probabilities floored at 1e-12.
pub fn classification_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("probabilities {s:?} for {} labels", labels.len())));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let onehot = Tensor::from_fn(s.clone(), |i| if labels[i / k] == i % k { T::one() } else { T::zero() });
    let oh = g.constant(onehot);
    let picked = g.mul(probs, oh)?;
    let p = g.sum_axis(picked, 1)?;
    let p = g.clamp_min(p, T::lit(1e-12));
    let lp = g.log(p);
    let m = g.mean(lp);
    Ok(g.scale(m, -T::one()))
}

pub fn total_loss<T: Scalar>(g: &mut Graph<T>, gen: Var, cls: Var, weights: [f64; 2]) -> Result<Var> {
    let a = g.scale(gen, T::lit(weights[0]));
    let b = g.scale(cls, T::lit(weights[1]));
    g.add(a, b)
}

/// All generator losses for one batch.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses<T: Scalar>(
    g: &mut Graph<T>,
    pred_scan: Var,
    true_scan: Var,
    pred_probs: Var,
    labels: &[usize],
    fake_logits: Option<Var>,
    adv_weight: f64,
    weights: [f64; 2],
) -> Result<Losses> {
    let (gen, l1, adv) = generation_loss(g, pred_scan, true_scan, fake_logits, adv_weight)?;
    let cls = classification_loss(g, pred_probs, labels)?;
    let total = total_loss(g, gen, cls, weights)?;
    Ok(Losses { total, gen, cls, l1, adv })
}

/// `mean(softplus(-D(real))) + mean(softplus(D(fake)))`.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let r = adversarial_loss(g, real_logits);
    let f = g.softplus(fake_logits);
    let f = g.mean(f);
    g.add(r, f)
}
