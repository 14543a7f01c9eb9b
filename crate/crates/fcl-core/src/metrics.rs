//! Pixel-level evaluation metrics: MAE, mean IoU, mean F1.
//!
//! Predictions are probability maps in [0,1]; ground truth is binary. IoU
//! and F1 binarize predictions at 0.5. Degenerate cases score 1 when both
//! prediction and ground truth are empty, else 0.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

fn check_shapes(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(CoreError::shape(
            op,
            format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(())
}

/// Mean absolute pixel difference.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_shapes("mae", pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p - g).abs())
        .sum::<f64>()
        / n)
}

fn counts(pred: &Tensor, gt: &Tensor) -> (f64, f64, f64) {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let pb = p > 0.5;
        let gb = g > 0.5;
        match (pb, gb) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

/// Intersection over union at threshold 0.5.
pub fn iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_shapes("iou", pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    let union = tp + fp + fn_;
    if union == 0.0 {
        return Ok(1.0);
    }
    Ok(tp / union)
}

/// F1 at threshold 0.5.
pub fn f1(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_shapes("f1", pred, gt)?;
    let (tp, fp, fn_) = counts(pred, gt);
    if tp + fp + fn_ == 0.0 {
        return Ok(1.0);
    }
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp / denom)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MetricSummary {
    pub mae: f64,
    pub miou: f64,
    pub mf1: f64,
    pub count: usize,
}

/// Dataset-level means over per-sample metrics.
pub fn summarize(pairs: &[(Tensor, Tensor)]) -> Result<MetricSummary> {
    if pairs.is_empty() {
        return Err(CoreError::Invalid("no samples to evaluate".into()));
    }
    let mut s = MetricSummary { count: pairs.len(), ..Default::default() };
    for (pred, gt) in pairs {
        s.mae += mae(pred, gt)?;
        s.miou += iou(pred, gt)?;
        s.mf1 += f1(pred, gt)?;
    }
    let n = pairs.len() as f64;
    s.mae /= n;
    s.miou /= n;
    s.mf1 /= n;
    Ok(s)
}
