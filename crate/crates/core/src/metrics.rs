//! Confusion-matrix segmentation metrics.

use crate::error::{Error, Result};
use crate::model::PixelNet;
use crate::data::Dataset;
use crate::stats::IGNORE_LABEL;

/// Pixel counts indexed by (ground truth, prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            num_classes: c,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one pixel; ignored labels are skipped.
    pub fn add(&mut self, truth: usize, pred: usize) {
        if truth == IGNORE_LABEL {
            return;
        }
        self.counts[truth * self.num_classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn truth_count(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(class, p)).sum()
    }

    pub fn pred_count(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, class)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub miou: f64,
    pub macc: f64,
    /// IoU per class; NaN for classes absent from both prediction and truth.
    pub per_class_iou: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

impl EvalResult {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let c = confusion.num_classes();
        let mut per_class_iou = Vec::with_capacity(c);
        let mut recalls = Vec::new();
        for k in 0..c {
            let tp = confusion.get(k, k);
            let truth = confusion.truth_count(k);
            let union = truth + confusion.pred_count(k) - tp;
            per_class_iou.push(if union == 0 { f64::NAN } else { tp as f64 / union as f64 });
            if truth > 0 {
                recalls.push(tp as f64 / truth as f64);
            }
        }
        let present: Vec<f64> = per_class_iou.iter().copied().filter(|x| !x.is_nan()).collect();
        EvalResult {
            miou: mean_or_zero(&present),
            macc: mean_or_zero(&recalls),
            per_class_iou,
            confusion,
        }
    }
}

fn mean_or_zero(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Predictions are the per-pixel argmax of the network logits.
pub fn evaluate(net: &PixelNet, dataset: &Dataset) -> Result<EvalResult> {
    let mut confusion = ConfusionMatrix::new(net.num_classes());
    for image in &dataset.images {
        let logits = net.forward(&image.pixels)?.logits;
        for (i, &y) in image.labels.iter().enumerate() {
            if y != IGNORE_LABEL && y >= net.num_classes() {
                return Err(Error::UnknownClass {
                    class: y,
                    num_classes: net.num_classes(),
                });
            }
            confusion.add(y, argmax(logits.row(i)));
        }
    }
    Ok(EvalResult::from_confusion(confusion))
}

/// Metrics for precomputed predictions.
pub fn evaluate_predictions(num_classes: usize, truth: &[usize], pred: &[usize]) -> Result<EvalResult> {
    if truth.len() != pred.len() {
        return Err(Error::shape(format!("{} labels and {} predictions", truth.len(), pred.len())));
    }
    let mut confusion = ConfusionMatrix::new(num_classes);
    for (&t, &p) in truth.iter().zip(pred) {
        if (t != IGNORE_LABEL && t >= num_classes) || p >= num_classes {
            return Err(Error::UnknownClass {
                class: t.max(p),
                num_classes,
            });
        }
        confusion.add(t, p);
    }
    Ok(EvalResult::from_confusion(confusion))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let truth = [0, 1, 2, 2, 1, 0];
        let r = evaluate_predictions(3, &truth, &truth).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.macc, 1.0);
    }

    #[test]
    fn hand_computed_binary_confusion() {
        let cm = ConfusionMatrix::from_rows(&[vec![50, 50], vec![0, 100]]).unwrap();
        let r = EvalResult::from_confusion(cm);
        assert_eq!(r.per_class_iou[0], 0.5);
        assert_eq!(r.per_class_iou[1], 100.0 / 150.0);
        assert_eq!(r.miou, (0.5 + 100.0 / 150.0) / 2.0);
        assert!((r.miou - 0.583333).abs() < 1e-6);
        assert_eq!(r.macc, (0.5 + 1.0) / 2.0);
        assert_eq!(r.confusion.truth_count(0), 100);
        assert_eq!(r.confusion.total(), 200);
    }

    #[test]
    fn disjoint_predictions_score_zero() {
        let r = evaluate_predictions(2, &[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(r.miou, 0.0);
        assert_eq!(r.macc, 0.0);
    }

    #[test]
    fn absent_classes_are_excluded() {
        // class 2 never appears in truth or prediction
        let r = evaluate_predictions(3, &[0, 1, 1], &[0, 1, 0]).unwrap();
        assert!(r.per_class_iou[2].is_nan());
        assert_eq!(r.miou, (0.5 + 0.5) / 2.0);
        assert_eq!(r.macc, (1.0 + 0.5) / 2.0);
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let r = evaluate_predictions(2, &[0, IGNORE_LABEL, 1], &[0, 0, 1]).unwrap();
        assert_eq!(r.confusion.total(), 2);
        assert_eq!(r.miou, 1.0);
    }
}
