//! Accuracy and F1 evaluation.

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};

/// Anything that can classify a feature vector.
pub trait Predictor: Sync {
    fn predict_one(&self, x: &[f64]) -> Label;
}

impl Predictor for crate::tree::Tree {
    fn predict_one(&self, x: &[f64]) -> Label {
        self.predict(x)
    }
}

impl Predictor for crate::annotation::AnnotatedTree {
    fn predict_one(&self, x: &[f64]) -> Label {
        self.predict(x)
    }
}

/// Test-set quality of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
}

/// Metrics from aligned prediction/actual label slices. F1 is computed with
/// respect to `positive` and defined as 0 when TP, FP and FN are all 0.
pub fn metrics_from_predictions(preds: &[Label], actuals: &[Label], positive: Label) -> Metrics {
    assert_eq!(preds.len(), actuals.len());
    let mut correct = 0usize;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &a) in preds.iter().zip(actuals) {
        if p == a {
            correct += 1;
        }
        match (p == positive, a == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let accuracy = correct as f64 / preds.len() as f64;
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    };
    Metrics { accuracy, f1 }
}

/// Evaluate a model over a dataset's effective labels.
pub fn compute_metrics(model: &impl Predictor, d: &Dataset, positive: Label) -> Metrics {
    let preds: Vec<Label> = (0..d.len()).map(|i| model.predict_one(d.features(i))).collect();
    let actuals: Vec<Label> = (0..d.len()).map(|i| d.effective_label(i)).collect();
    metrics_from_predictions(&preds, &actuals, positive)
}

/// Accuracy only; the quantity greedy attacks minimize.
pub fn accuracy(model: &impl Predictor, d: &Dataset) -> f64 {
    let correct = (0..d.len())
        .filter(|&i| model.predict_one(d.features(i)) == d.effective_label(i))
        .count();
    correct as f64 / d.len() as f64
}
