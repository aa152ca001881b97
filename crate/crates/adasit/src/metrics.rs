//! Exact evaluation metrics for imbalanced binary prediction.
//!
//! `auc` is the Mann–Whitney statistic: the fraction of (positive, negative)
//! pairs where the positive outscores the negative, ties counting one half.
//! `average_precision` is the area under the precision–recall step curve
//! with tied scores entering each threshold together. Both are computed by
//! rank arithmetic, not curve interpolation, so they can be checked against
//! brute-force pair enumeration to machine precision.
//!
//! Per-task splits here are tiny and frequently single-class, so the report
//! keeps per-task values optional and treats the pooled (micro) numbers as
//! the primary comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("{0} requires both classes to be present")]
    SingleClass(&'static str),
    #[error("average precision requires at least one positive label")]
    NoPositives,
    #[error("empty input")]
    Empty,
}

/// Scores and labels for one task's evaluation split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskPredictions {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Per-task metrics; `auc`/`ap` are absent when the split is single-class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub n_pos: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
}

/// Pooled and per-task metrics over a set of tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_auc: f64,
    pub micro_ap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_ap: Option<f64>,
    pub per_task: BTreeMap<String, TaskMetrics>,
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Indices sorted ascending by score; ties keep input order (stable).
fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    order
}

/// Area under the ROC curve via the Mann–Whitney rank statistic.
///
/// Equals the probability that a uniformly random positive outscores a
/// uniformly random negative, ties counted as 1/2.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass("auc"));
    }

    let order = ascending_order(scores);

    // Average 1-based ranks within tied groups, then sum ranks of positives.
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        start = end;
    }

    let n_pos = n_pos as f64;
    let n_neg = n_neg as f64;
    Ok((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Area under the precision–recall step curve.
///
/// Thresholds descend through the distinct score values; all samples at one
/// score enter together. AP = Σ (Rₙ − Rₙ₋₁) · Pₙ.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    check_lengths(scores, labels)?;
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }

    let order = ascending_order(scores);

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut recall_prev = 0.0;
    // Walk tied groups from the highest score down.
    let mut end = n;
    while end > 0 {
        let mut start = end - 1;
        while start > 0 && scores[order[start - 1]] == scores[order[end - 1]] {
            start -= 1;
        }
        for &idx in &order[start..end] {
            if labels[idx] {
                tp += 1;
            }
            seen += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        end = start;
    }
    Ok(ap)
}

/// Pools predictions across tasks into micro metrics and attaches per-task
/// metrics where the split has both classes; macro values are unweighted
/// means over the defined per-task values.
pub fn build_report(
    per_task: &BTreeMap<String, TaskPredictions>,
) -> Result<MetricsReport, MetricsError> {
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    for preds in per_task.values() {
        check_len_only(preds)?;
        pooled_scores.extend_from_slice(&preds.scores);
        pooled_labels.extend_from_slice(&preds.labels);
    }
    if pooled_scores.is_empty() {
        return Err(MetricsError::Empty);
    }

    let micro_auc = auc(&pooled_scores, &pooled_labels)?;
    let micro_ap = average_precision(&pooled_scores, &pooled_labels)?;

    let mut report_tasks = BTreeMap::new();
    let mut defined_auc = Vec::new();
    let mut defined_ap = Vec::new();
    for (task_id, preds) in per_task {
        let n = preds.scores.len();
        let n_pos = preds.labels.iter().filter(|&&y| y).count();
        let (task_auc, task_ap) = if n_pos == 0 || n_pos == n {
            (None, None)
        } else {
            let a = auc(&preds.scores, &preds.labels)?;
            let p = average_precision(&preds.scores, &preds.labels)?;
            defined_auc.push(a);
            defined_ap.push(p);
            (Some(a), Some(p))
        };
        report_tasks.insert(
            task_id.clone(),
            TaskMetrics {
                n,
                n_pos,
                auc: task_auc,
                ap: task_ap,
            },
        );
    }

    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };

    Ok(MetricsReport {
        micro_auc,
        micro_ap,
        macro_auc: mean(&defined_auc),
        macro_ap: mean(&defined_ap),
        per_task: report_tasks,
    })
}

fn check_len_only(preds: &TaskPredictions) -> Result<(), MetricsError> {
    if preds.scores.len() != preds.labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: preds.scores.len(),
            labels: preds.labels.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Brute-force references, kept independent of the rank-based paths above.

    /// AUC by enumerating every (positive, negative) pair.
    pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if !yi {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// AP by sweeping every distinct threshold and recomputing the confusion
    /// counts from scratch at each.
    pub fn ap_threshold_sweep(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&y| y).count() as f64;

        let mut ap = 0.0;
        let mut recall_prev = 0.0;
        for &tau in &thresholds {
            let mut tp = 0.0;
            let mut predicted_pos = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if scores[i] >= tau {
                    predicted_pos += 1.0;
                    if y {
                        tp += 1.0;
                    }
                }
            }
            let recall = tp / n_pos;
            let precision = tp / predicted_pos;
            ap += (recall - recall_prev) * precision;
            recall_prev = recall;
        }
        ap
    }
}
