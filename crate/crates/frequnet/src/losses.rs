//! The composite training objective: a frequency-aware detail-matching term,
//! multi-class soft Dice, and Top-K cross-entropy over the hardest pixels,
//! combined by configurable weights.

use crate::error::{Error, Result};
use crate::tensor::tape::Var;
use crate::tensor::{LabelMap, Shape, Tensor};
use crate::wavelet::WaveletSpec;

/// Smoothing constant guarding empty classes in the Dice ratio.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub dice: f64,
    pub topk: f64,
    pub freq: f64,
    /// Percentage of hardest pixels the cross-entropy averages over.
    pub topk_percent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dice: 1.0, topk: 1.0, freq: 0.5, topk_percent: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.dice < 0.0 || self.topk < 0.0 || self.freq < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.dice == 0.0 && self.topk == 0.0 && self.freq == 0.0 {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if !(self.topk_percent > 0.0 && self.topk_percent <= 100.0) {
            return Err(Error::config(format!(
                "topk_percent must lie in (0, 100], got {}",
                self.topk_percent
            )));
        }
        Ok(())
    }
}

/// Scalar values of one loss evaluation. Terms whose weight is zero are not
/// evaluated and report as 0.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub dice_term: f64,
    pub topk_term: f64,
    pub freq_term: f64,
    pub per_class_dice: Vec<f64>,
}

/// Mean absolute difference of the three detail subbands of `prob` and
/// `onehot`. The LL band is excluded: only high-frequency structure counts.
pub fn freq_aware_loss(prob: &Var, onehot: &Var, wspec: &WaveletSpec) -> Result<Var> {
    let k = prob.shape().c();
    let diff = prob.sub(onehot)?;
    let bands = diff.dwt2(wspec)?;
    let details = bands.slice_channels(k, 4 * k)?;
    Ok(details.abs().mean_all())
}

/// Soft Dice loss plus the per-class soft Dice coefficients it is built
/// from. Sums run over the whole batch per class; range (-1, 0].
pub fn dice_loss_with_classes(
    prob: &Var,
    onehot: &Var,
    eps: f64,
) -> Result<(Var, Vec<f64>)> {
    let k = prob.shape().c();
    if k == 0 {
        return Err(Error::dim("dice over zero classes"));
    }
    let num = prob.mul(onehot)?.sum_per_channel().add_scalar(eps);
    let den = prob
        .sum_per_channel()
        .add(&onehot.sum_per_channel())?
        .add_scalar(eps);
    let frac = num.div(&den)?;
    let per_class: Vec<f64> = frac.value().data().iter().map(|f| 2.0 * f).collect();
    let loss = frac.sum_all().scale(-2.0 / k as f64);
    Ok((loss, per_class))
}

pub fn dice_loss(prob: &Var, onehot: &Var, eps: f64) -> Result<Var> {
    Ok(dice_loss_with_classes(prob, onehot, eps)?.0)
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-pixel cross-entropy values. The label-free variant averages the
/// negative log-probabilities over every class instead of picking the true
/// one; it exists for auditing the alternative formulation and is off by
/// default.
fn per_pixel_ce(logits: &Tensor, labels: &LabelMap, labelfree: bool) -> Result<Vec<f64>> {
    let s = logits.shape();
    let (b, k, h, w) = (s.b(), s.c(), s.h(), s.w());
    if labels.b != b || labels.h != h || labels.w != w {
        return Err(Error::dim(format!(
            "labels {}x{}x{} against logits {}",
            labels.b, labels.h, labels.w, s
        )));
    }
    let mut ce = Vec::with_capacity(b * h * w);
    let mut row = vec![0.0; k];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot = logits.at(bi, c, y, x);
                }
                let lse = log_sum_exp(&row);
                let val = if labelfree {
                    let mean: f64 = row.iter().sum::<f64>() / k as f64;
                    lse - mean
                } else {
                    let lab = labels.at(bi, y, x) as usize;
                    if lab >= k {
                        return Err(Error::data(format!(
                            "label {lab} out of range for {k} classes"
                        )));
                    }
                    lse - row[lab]
                };
                ce.push(val);
            }
        }
    }
    Ok(ce)
}

/// Cross-entropy averaged over the hardest k percent of pixels (at least
/// one). A fused tape op: the selection is frozen in the forward pass and
/// the backward pass routes gradients only through the selected pixels.
pub fn topk_ce_loss(
    logits: &Var,
    labels: &LabelMap,
    k_percent: f64,
    labelfree: bool,
) -> Result<Var> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::config(format!(
            "topk percentage must lie in (0, 100], got {k_percent}"
        )));
    }
    let lv = logits.value();
    let ce = per_pixel_ce(&lv, labels, labelfree)?;
    let n = ce.len();
    let k_sel = ((n as f64 * k_percent / 100.0).floor() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|a, b| ce[*b].total_cmp(&ce[*a]));
    let selected: Vec<usize> = order[..k_sel].to_vec();
    let mean = selected.iter().map(|i| ce[*i]).sum::<f64>() / k_sel as f64;

    let labels = labels.clone();
    let out = Tensor::scalar(mean);
    Ok(logits.tape().push(
        out,
        vec![logits.id()],
        Box::new(move |g| {
            let s = lv.shape();
            let (kc, h, w) = (s.c(), s.h(), s.w());
            let scale = g.item() / k_sel as f64;
            let mut grad = vec![0.0; s.numel()];
            let mut row = vec![0.0; kc];
            for pix in &selected {
                let bi = pix / (h * w);
                let y = (pix % (h * w)) / w;
                let x = pix % w;
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot = lv.at(bi, c, y, x);
                }
                let lse = log_sum_exp(&row);
                for c in 0..kc {
                    let p = (row[c] - lse).exp();
                    let target = if labelfree {
                        1.0 / kc as f64
                    } else if labels.at(bi, y, x) as usize == c {
                        1.0
                    } else {
                        0.0
                    };
                    grad[s.idx(bi, c, y, x)] = scale * (p - target);
                }
            }
            vec![Tensor::from_vec(s, grad).expect("shape fixed")]
        }),
    ))
}

/// Weighted combination of the three terms, differentiable through the
/// tape, plus the scalar report for logging.
pub fn total_loss(
    logits: &Var,
    labels: &LabelMap,
    weights: &LossWeights,
    wspec: &WaveletSpec,
    labelfree_ce: bool,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let k = logits.shape().c();
    let prob = logits.softmax_channel();
    let onehot = logits.tape().constant(labels.one_hot(k)?);

    let (dice, per_class_dice) = dice_loss_with_classes(&prob, &onehot, DICE_EPS)?;
    let dice_term = dice.value().item();
    let mut total = dice.scale(weights.dice);

    let mut topk_term = 0.0;
    if weights.topk > 0.0 {
        let t = topk_ce_loss(logits, labels, weights.topk_percent, labelfree_ce)?;
        topk_term = t.value().item();
        total = total.add(&t.scale(weights.topk))?;
    }

    let mut freq_term = 0.0;
    if weights.freq > 0.0 {
        let f = freq_aware_loss(&prob, &onehot, wspec)?;
        freq_term = f.value().item();
        total = total.add(&f.scale(weights.freq))?;
    }

    let report = LossReport {
        total: total.value().item(),
        dice_term,
        topk_term,
        freq_term,
        per_class_dice,
    };
    Ok((total, report))
}
