//! Training losses, patch-level ground truth and evaluation metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1.0;

/// Patch labels from a binary `H×W` mask: 1 where the patch holds at least
/// one positive pixel. Zero-based, row-major over the patch grid.
pub fn derive_gt_patch_labels(mask: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w) = match mask.shape() {
        &[h, w] => (h, w),
        s => {
            return Err(Error::Shape {
                op: "derive_gt_patch_labels",
                shape: s.to_vec(),
                reason: "expected an H×W mask".into(),
            })
        }
    };
    let n = crate::backbone::patch_grid_length(h, w, patch)?;
    let gw = w / patch;
    let mut labels = vec![0f32; n];
    for (y, row) in mask.data().chunks_exact(w).enumerate() {
        for (x, &v) in row.iter().enumerate() {
            if v > 0.0 {
                labels[(y / patch) * gw + x / patch] = 1.0;
            }
        }
    }
    Ok(Tensor::vector(labels))
}

/// Mean binary cross-entropy from logits.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, gt: &Tensor<T>) -> Result<Var> {
    tape.bce_with_logits(logits, gt)
}

/// `1 − (2·Σ p·g + ε) / (Σ p + Σ g + ε)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, probs: Var, gt: &Tensor<T>, eps: f64) -> Result<Var> {
    tape.dice(probs, gt, eps)
}

/// Loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    /// CE + DICE on the pixel mask.
    pub lx: Var,
    /// CE + DICE of the stage gates against the patch labels, averaged over
    /// stages; absent without pruning stages.
    pub lp: Option<Var>,
}

/// `L = CE(X_res, X_gt) + DICE(X_res, X_gt) + mean_m[CE(g_m, P_gt) + DICE(g_m, P_gt)]`.
pub fn vltp_loss<T: Real>(
    tape: &mut Tape<T>,
    mask_logits: Var,
    x_gt: &Tensor<T>,
    gates: &[Var],
    p_gt: Option<&Tensor<T>>,
) -> Result<LossParts> {
    let ce = cross_entropy(tape, mask_logits, x_gt)?;
    let probs = tape.sigmoid(mask_logits)?;
    let dice = dice_loss(tape, probs, x_gt, DICE_EPS)?;
    let lx = tape.add(ce, dice)?;
    if gates.is_empty() {
        return Ok(LossParts { total: lx, lx, lp: None });
    }
    let p_gt = p_gt.ok_or_else(|| Error::Config("vltp_loss: stage gates given without patch labels".into()))?;
    let mut sum: Option<Var> = None;
    for &gate in gates {
        let ce = tape.bce_prob(gate, p_gt)?;
        let dice = dice_loss(tape, gate, p_gt, DICE_EPS)?;
        let term = tape.add(ce, dice)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, term)?,
            None => term,
        });
    }
    let lp = tape.scale(sum.expect("at least one stage"), 1.0 / gates.len() as f64)?;
    let total = tape.add(lx, lp)?;
    Ok(LossParts { total, lx, lp: Some(lp) })
}

/// Binary mask from logits at probability 0.5 (logit 0).
pub fn binarize(logits: &[f32]) -> Vec<bool> {
    logits.iter().map(|&v| v > 0.0).collect()
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            op: "iou",
            lhs: vec![pred.len()],
            rhs: vec![gt.len()],
        });
    }
    let inter = pred.iter().zip(gt).filter(|(&a, &b)| a && b).count();
    let union = pred.iter().zip(gt).filter(|(&a, &b)| a || b).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn miou(per_sample: &[f64]) -> f64 {
    if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().sum::<f64>() / per_sample.len() as f64
    }
}

/// Fraction of relevant tokens (label 1) that were retained; 1 when there
/// are none.
pub fn prune_recall(retained: &[bool], labels: &[f32]) -> f64 {
    let relevant = labels.iter().filter(|&&l| l > 0.5).count();
    if relevant == 0 {
        return 1.0;
    }
    let hit = retained.iter().zip(labels).filter(|(&r, &l)| r && l > 0.5).count();
    hit as f64 / relevant as f64
}

/// Fraction of retained tokens that are relevant; 1 when none are retained.
pub fn prune_precision(retained: &[bool], labels: &[f32]) -> f64 {
    let kept = retained.iter().filter(|&&r| r).count();
    if kept == 0 {
        return 1.0;
    }
    let hit = retained.iter().zip(labels).filter(|(&r, &l)| r && l > 0.5).count();
    hit as f64 / kept as f64
}

/// One line of per-sample evaluation output.
#[derive(Clone, Debug, Serialize)]
pub struct SampleMetrics {
    pub sample: usize,
    pub iou: f64,
    pub prune_recall: f64,
    pub prune_precision: f64,
}
