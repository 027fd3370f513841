//! Class-weighted categorical cross-entropy, normalized by the total weight of
//! the valid frames in the batch:
//!
//! `L = sum_n -w[y_n] * log_softmax(x_n)[y_n] / sum_n w[y_n]`

use ndarray::{Array2, ArrayView2};

use super::weights::ClassWeights;
use crate::annotations::{FrameClass, FrameLabels, CLASS_COUNT};
use crate::error::{OsdError, Result};
use crate::nn::PredictionMatrix;

/// Unnormalized numerator and denominator of the weighted loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub weighted_nll: f64,
    pub weight_sum: f64,
}

impl LossParts {
    pub fn merge(self, o: LossParts) -> LossParts {
        LossParts {
            weighted_nll: self.weighted_nll + o.weighted_nll,
            weight_sum: self.weight_sum + o.weight_sum,
        }
    }

    pub fn mean(&self) -> Result<f64> {
        if self.weight_sum <= 0.0 {
            return Err(OsdError::InvalidInput("loss over an empty mask".into()));
        }
        Ok(self.weighted_nll / self.weight_sum)
    }
}

fn log_softmax(row: &[f64; CLASS_COUNT]) -> [f64; CLASS_COUNT] {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.map(|v| v - lse)
}

fn row3(logits: &ArrayView2<f64>, t: usize) -> [f64; CLASS_COUNT] {
    [logits[[t, 0]], logits[[t, 1]], logits[[t, 2]]]
}

fn check_segment(logits: &ArrayView2<f64>, targets: &[FrameClass], mask: &[bool]) -> Result<()> {
    if logits.ncols() != CLASS_COUNT || logits.nrows() != targets.len() || mask.len() != targets.len() {
        return Err(OsdError::Shape {
            expected: format!("{} frames x {CLASS_COUNT} classes with matching mask", targets.len()),
            actual: format!("{:?} logits, {} mask", logits.dim(), mask.len()),
        });
    }
    Ok(())
}

/// Loss parts for one segment; `logits` is frames-major `(T, 3)`.
pub fn segment_loss_parts(
    logits: ArrayView2<f64>,
    targets: &[FrameClass],
    mask: &[bool],
    weights: &ClassWeights,
) -> Result<LossParts> {
    check_segment(&logits, targets, mask)?;
    let mut parts = LossParts::default();
    for t in 0..targets.len() {
        if !mask[t] {
            continue;
        }
        let row = row3(&logits, t);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(OsdError::Divergence(format!("non-finite logit at frame {t}")));
        }
        let w = weights.of(targets[t]);
        parts.weighted_nll -= w * log_softmax(&row)[targets[t].index()];
        parts.weight_sum += w;
    }
    Ok(parts)
}

/// Gradient of `segment numerator / norm` w.r.t. frames-major logits.
pub fn segment_loss_grad(
    logits: ArrayView2<f64>,
    targets: &[FrameClass],
    mask: &[bool],
    weights: &ClassWeights,
    norm: f64,
) -> Result<Array2<f64>> {
    check_segment(&logits, targets, mask)?;
    let mut grad = Array2::zeros(logits.dim());
    for t in 0..targets.len() {
        if !mask[t] {
            continue;
        }
        let ls = log_softmax(&row3(&logits, t));
        let scale = weights.of(targets[t]) / norm;
        for c in 0..CLASS_COUNT {
            let target = if c == targets[t].index() { 1.0 } else { 0.0 };
            grad[[t, c]] = scale * (ls[c].exp() - target);
        }
    }
    Ok(grad)
}

/// Weighted cross-entropy over a batch of predictions and reference labels.
/// `masks[i][t]` selects which frames count.
pub fn weighted_ce(
    logits: &[PredictionMatrix],
    targets: &[FrameLabels],
    weights: &ClassWeights,
    masks: &[Vec<bool>],
) -> Result<f64> {
    if logits.len() != targets.len() || logits.len() != masks.len() {
        return Err(OsdError::Shape {
            expected: format!("{} segments", logits.len()),
            actual: format!("{} targets, {} masks", targets.len(), masks.len()),
        });
    }
    let mut total = LossParts::default();
    for ((pred, lab), mask) in logits.iter().zip(targets).zip(masks) {
        total = total.merge(segment_loss_parts(pred.logits.t(), &lab.labels, mask, weights)?);
    }
    total.mean()
}

/// Same as [`weighted_ce`] with each segment's own valid-frame mask.
pub fn weighted_ce_valid(logits: &[PredictionMatrix], targets: &[FrameLabels], weights: &ClassWeights) -> Result<f64> {
    let masks: Vec<Vec<bool>> = targets.iter().map(FrameLabels::mask).collect();
    weighted_ce(logits, targets, weights, &masks)
}
