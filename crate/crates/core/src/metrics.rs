//! Classification metrics over integer label vectors.
//!
//! The confusion matrix is indexed `[true][predicted]`. Precision, recall,
//! and F1 define 0/0 as 0, so a class that never occurs and is never
//! predicted contributes zero to the macro average rather than being
//! dropped from it.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no samples to score")]
    Empty,
    #[error("truth has {truth} labels, predictions have {pred}")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("{which} label {value} at index {index} is outside 0..{num_classes}")]
    LabelRange {
        which: &'static str,
        value: usize,
        index: usize,
        num_classes: usize,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose true label is this class.
    pub support: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn classification_report(
    truth: &[usize],
    pred: &[usize],
    num_classes: usize,
) -> Result<MetricsReport, MetricsError> {
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    for (which, labels) in [("true", truth), ("predicted", pred)] {
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(MetricsError::LabelRange { which, value, index, num_classes });
        }
    }

    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        confusion[t][p] += 1;
    }

    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let fp: f64 = (0..num_classes).filter(|&t| t != c).map(|t| confusion[t][c] as f64).sum();
        let fn_: f64 = (0..num_classes).filter(|&p| p != c).map(|p| confusion[c][p] as f64).sum();
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: confusion[c].iter().sum(),
        });
    }

    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / num_classes as f64;
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / truth.len() as f64;
    Ok(MetricsReport { confusion, per_class, macro_f1, accuracy })
}

pub fn macro_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<f64, MetricsError> {
    Ok(classification_report(truth, pred, num_classes)?.macro_f1)
}
