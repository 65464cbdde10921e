//! Confusion-matrix metrics and AUROC for labeled runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores for predicted labels against ground truth. Metrics whose
/// denominator is empty are reported as missing: recall and F1 when the
/// truth has no positives, FPR and inlier retention when it has no
/// negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: Option<f64>,
    pub fpr: Option<f64>,
    pub f1: Option<f64>,
    pub auroc: Option<f64>,
    pub inlier_retention: Option<f64>,
}

/// Confusion-matrix metrics with the zero-denominator conventions above;
/// `precision` is 0 when nothing is predicted positive.
pub fn score_labels(truth: &[bool], predicted: &[bool]) -> Result<MetricsReport> {
    if truth.len() != predicted.len() {
        return Err(Error::DegenerateInput(format!(
            "label length mismatch: {} vs {}",
            truth.len(),
            predicted.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &p) in truth.iter().zip(predicted) {
        match (t, p) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fn_ += 1,
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        Some(tp as f64 / (tp + fn_) as f64)
    } else {
        None
    };
    let fpr = if fp + tn > 0 {
        Some(fp as f64 / (fp + tn) as f64)
    } else {
        None
    };
    let f1 = recall.map(|r| {
        if precision + r > 0.0 {
            2.0 * precision * r / (precision + r)
        } else {
            0.0
        }
    });
    let inlier_retention = if fp + tn > 0 {
        Some(tn as f64 / (tn + fp) as f64)
    } else {
        None
    };
    Ok(MetricsReport {
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        fpr,
        f1,
        auroc: None,
        inlier_retention,
    })
}

/// Area under the ROC curve by the Mann-Whitney statistic:
/// `P(score_pos > score_neg) + 0.5 * P(equal)`, computed from mid-ranks.
pub fn auroc(truth: &[bool], scores: &[f64]) -> Result<f64> {
    if truth.len() != scores.len() {
        return Err(Error::DegenerateInput(format!(
            "label/score length mismatch: {} vs {}",
            truth.len(),
            scores.len()
        )));
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auroc requires both classes present".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateInput("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Mid-ranks (1-based) with tie averaging.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if truth[idx] {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
