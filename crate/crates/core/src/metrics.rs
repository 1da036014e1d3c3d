//! Evaluation metrics: pseudo-label quality, confidence AUC, error rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence-thresholded pseudo-label quality.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_confident: usize,
}

/// Which rule turns a confidence into a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSource {
    /// Estimator output, selected when strictly above the threshold.
    Estimator,
    /// Maximum class probability, selected when at or above the threshold.
    MaxProb,
}

/// Threshold used for the estimator rule.
pub const ESTIMATOR_THRESHOLD: f64 = 0.5;

pub fn confident_set(confidences: &[f64], source: ConfidenceSource, threshold: f64) -> Vec<bool> {
    confidences
        .iter()
        .map(|&c| match source {
            ConfidenceSource::Estimator => c > threshold,
            ConfidenceSource::MaxProb => c >= threshold,
        })
        .collect()
}

/// Precision, recall and F1 of the confident pseudo-labels. A confident and
/// correct label is a true positive, confident and wrong a false positive,
/// and an unconfident but correct one a false negative. Zero denominators
/// give zero.
pub fn pseudo_quality(predicted: &[usize], truth: &[u32], confident: &[bool]) -> Result<PseudoQuality> {
    if predicted.len() != truth.len() || confident.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predicted.len().max(confident.len()),
            right: truth.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for ((&s, &p), &y) in confident.iter().zip(predicted).zip(truth) {
        match (s, p == y as usize) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PseudoQuality {
        precision,
        recall,
        f1,
        n_confident: tp + fp,
    })
}

/// Area under the ROC curve of `scores` separating `true` from `false`
/// labels, via the rank-sum statistic. Tied scores earn half credit.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DomainError("AUC scores must not be NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (average) ranks of the positives, ranks starting at 1.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of mismatched predictions.
pub fn error_rate(predictions: &[usize], labels: &[u32]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::invalid("error rate of an empty set"));
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| p != y as usize)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Accuracy per class; `None` for classes absent from `labels`.
pub fn per_class_accuracy(predictions: &[usize], labels: &[u32], n_classes: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        let y = y as usize;
        total[y] += 1;
        if p == y {
            hit[y] += 1;
        }
    }
    hit.iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}
