//! Binary-classification evaluation: rank-based AUC, Youden's J threshold
//! selection, and thresholded precision/recall/F1 with fold summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("scores and labels must both contain positives and negatives")]
    SingleClass,
    #[error("{0}")]
    Invalid(String),
}

/// Paired per-sample scores and 0/1 labels.
#[derive(Debug, Clone)]
pub struct ScoredLabels {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::Invalid(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(MetricsError::Invalid("labels must be 0 or 1".to_string()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MetricsError::Invalid("non-finite score".to_string()));
        }
        Ok(ScoredLabels { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(score+ > score-) + 0.5 * P(score+ = score-)`, computed from midranks.
pub fn auc(data: &ScoredLabels) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = data.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..data.scores.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    // Sum positive midranks; ties share the average rank of their run.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && data.scores[order[j + 1]] == data.scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if data.labels[idx] == 1 {
                rank_sum += midrank;
            }
        }
        i = j + 1;
    }

    let n_pos_f = n_pos as f64;
    Ok((rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Candidate thresholds: midpoints between adjacent distinct sorted scores,
/// bracketed by -inf and +inf sentinels.
fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = vec![f64::NEG_INFINITY];
    out.extend(sorted.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(f64::INFINITY);
    out
}

fn sens_spec(data: &ScoredLabels, threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut tn, mut fal_n) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in data.scores.iter().zip(&data.labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fal_n += 1,
        }
    }
    let sens = tp as f64 / (tp + fal_n).max(1) as f64;
    let spec = tn as f64 / (tn + fp).max(1) as f64;
    (sens, spec)
}

/// Picks the candidate threshold maximizing J = sensitivity + specificity - 1,
/// breaking ties toward higher sensitivity and then lower threshold.
/// Predictions are positive at scores >= threshold.
pub fn youden_threshold(data: &ScoredLabels) -> Result<f64, MetricsError> {
    let (n_pos, n_neg) = data.class_counts();
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    // Candidates scan from low to high threshold, so keeping the first
    // maximal (J, sensitivity) pair also keeps the lowest such threshold.
    let mut best: Option<(f64, f64, f64)> = None; // (J, sens, threshold)
    for t in threshold_candidates(&data.scores) {
        let (sens, spec) = sens_spec(data, t);
        let j = sens + spec - 1.0;
        let better = match best {
            None => true,
            Some((bj, bs, _)) => j > bj || (j == bj && sens > bs),
        };
        if better {
            best = Some((j, sens, t));
        }
    }
    Ok(best.expect("at least the sentinel candidates exist").2)
}

/// Precision/recall/F1 at a fixed threshold (positive at score >= threshold).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when no positives were predicted, in which case precision is
    /// reported as 0 by convention rather than 0/0.
    pub precision_undefined: bool,
}

pub fn prf_at_threshold(data: &ScoredLabels, threshold: f64) -> PrfResult {
    let (mut tp, mut fp, mut fal_n) = (0usize, 0usize, 0usize);
    for (&s, &l) in data.scores.iter().zip(&data.labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fal_n += 1,
            (false, false) => {}
        }
    }
    let precision_undefined = tp + fp == 0;
    let precision = if precision_undefined {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fal_n == 0 {
        0.0
    } else {
        tp as f64 / (tp + fal_n) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfResult {
        precision,
        recall,
        f1,
        precision_undefined,
    }
}

/// One fold's evaluation record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Mean, standard deviation, and normal-approximation 95% confidence
/// interval (mean +/- 1.96 sd / sqrt(k)) of one metric across folds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

pub fn summarize(values: &[f64]) -> MetricSummary {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    let sd = var.sqrt();
    let half = 1.96 * sd / k.sqrt();
    MetricSummary {
        mean,
        sd,
        ci_low: mean - half,
        ci_high: mean + half,
    }
}
