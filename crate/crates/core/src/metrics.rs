//! Classification metrics from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub per_class_f1: Vec<f64>,
    /// Classes with no true and no predicted instances (their F1 counts as 0).
    pub absent_classes: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, macro-F1 and sensitivity/specificity. For two classes class 1
/// is the positive class; for more, sensitivity and specificity are macro
/// averages of the one-vs-rest values.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], k: usize) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("metrics need at least one prediction"));
    }
    if k == 0 {
        return Err(Error::contract("metrics need at least one class"));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= k || y >= k {
            return Err(Error::contract(format!("label {} out of range for {k} classes", p.max(y))));
        }
        confusion[y][p] += 1;
    }
    let n = labels.len();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();

    let mut per_class_f1 = Vec::with_capacity(k);
    let mut absent_classes = Vec::new();
    let mut sens = Vec::with_capacity(k);
    let mut spec = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c][c];
        let fn_ = confusion[c].iter().sum::<usize>() - tp;
        let fp = (0..k).map(|r| confusion[r][c]).sum::<usize>() - tp;
        let tn = n - tp - fn_ - fp;
        if tp + fn_ + fp == 0 {
            absent_classes.push(c);
        }
        per_class_f1.push(ratio(2 * tp, 2 * tp + fp + fn_));
        sens.push(ratio(tp, tp + fn_));
        spec.push(ratio(tn, tn + fp));
    }
    let (sensitivity, specificity) = if k == 2 {
        (sens[1], spec[1])
    } else {
        (
            sens.iter().sum::<f64>() / k as f64,
            spec.iter().sum::<f64>() / k as f64,
        )
    };
    Ok(MetricsReport {
        accuracy: ratio(correct, n),
        macro_f1: per_class_f1.iter().sum::<f64>() / k as f64,
        sensitivity,
        specificity,
        per_class_f1,
        absent_classes,
        confusion,
        n,
    })
}

/// A fraction rendered as a percentage with two decimals.
pub fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}
