//! Classification metrics: unweighted F1 (UF1), unweighted average recall
//! (UAR) and accuracy, from per-class confusion counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-class confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// True sample count of the class (tp + fn).
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub uf1: f64,
    pub uar: f64,
    pub acc: f64,
    /// confusion[true_class][predicted_class]
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassCounts>,
}

/// Compute UF1 = mean over classes of 2TP/(2TP+FP+FN), UAR = mean of TP/N,
/// and ACC = ΣTP / total.
///
/// Classes with no true samples and no false positives never appear in the
/// data at all; they are dropped from both unweighted averages. A class that
/// is only ever (wrongly) predicted stays in, contributing F1 = 0 and
/// recall = 0.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Input("metrics of an empty prediction set".into()));
    }
    if let Some(&bad) = labels.iter().chain(predictions.iter()).find(|&&v| v >= n_classes) {
        return Err(Error::Input(format!(
            "class index {bad} outside [0, {n_classes})"
        )));
    }

    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels.iter()) {
        confusion[l][p] += 1;
    }

    let mut per_class = Vec::with_capacity(n_classes);
    for (k, row) in confusion.iter().enumerate() {
        let tp = row[k];
        let fn_ = row.iter().sum::<usize>() - tp;
        let fp = confusion.iter().map(|r| r[k]).sum::<usize>() - tp;
        per_class.push(ClassCounts {
            tp,
            fp,
            fn_,
            n: tp + fn_,
        });
    }

    let included: Vec<&ClassCounts> = per_class.iter().filter(|c| c.n > 0 || c.fp > 0).collect();
    let denom = included.len() as f64;
    let uf1 = included
        .iter()
        .map(|c| 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
        .sum::<f64>()
        / denom;
    let uar = included
        .iter()
        .map(|c| if c.n > 0 { c.tp as f64 / c.n as f64 } else { 0.0 })
        .sum::<f64>()
        / denom;
    let total_tp: usize = per_class.iter().map(|c| c.tp).sum();
    let acc = total_tp as f64 / predictions.len() as f64;

    Ok(Metrics {
        uf1,
        uar,
        acc,
        confusion,
        per_class,
    })
}
