//! Accuracy, macro one-vs-rest ROC AUC and dispersion statistics.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resampling::SamplerKind;

/// Metrics of one model on one test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `None` when the split holds fewer than two classes.
    pub auc: Option<f64>,
    pub sample_count: usize,
}

/// One evaluation point of the cross-validation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fold: usize,
    pub sampler: SamplerKind,
    pub round: usize,
    pub test_accuracy: f64,
    pub test_auc: f64,
    pub std_test_accuracy: f64,
    pub std_test_auc: f64,
    pub train_loss: f64,
}

/// Fold-averaged metrics for one (sampler, round).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sampler: SamplerKind,
    pub round: usize,
    pub folds: usize,
    pub test_accuracy: f64,
    pub test_auc: f64,
    pub std_test_accuracy: f64,
    pub std_test_auc: f64,
    pub train_loss: f64,
}

/// Number of distinct labels.
pub fn class_counts_present(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Metrics(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Metrics("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Index of the largest score per row; ties go to the lower class index.
pub fn argmax_rows(scores: ArrayView2<'_, f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// 1-based ranks with tied values sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Per-class one-vs-rest AUC via the Mann-Whitney rank sum. Classes that do
/// not occur in `labels` get `None`.
pub fn roc_auc_ovr(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    if scores.nrows() != labels.len() {
        return Err(Error::Metrics(format!(
            "{} score rows for {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metrics("non-finite score".into()));
    }
    let num_classes = scores.ncols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Metrics(format!(
            "label {bad} has no score column ({num_classes} columns)"
        )));
    }
    let n = labels.len();
    let mut out = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let positives = labels.iter().filter(|&&l| l == c).count();
        let negatives = n - positives;
        if positives == 0 || negatives == 0 {
            out.push(None);
            continue;
        }
        let column: Vec<f64> = scores.column(c).to_vec();
        let ranks = average_ranks(&column);
        let rank_sum: f64 = (0..n).filter(|&i| labels[i] == c).map(|i| ranks[i]).sum();
        let p = positives as f64;
        let u = rank_sum - p * (p + 1.0) / 2.0;
        out.push(Some(u / (p * negatives as f64)));
    }
    Ok(out)
}

/// Unweighted mean of the one-vs-rest AUCs of every class present in
/// `labels`.
pub fn roc_auc_macro(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let per_class = roc_auc_ovr(scores, labels)?;
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    if present.len() < 2 {
        return Err(Error::Metrics(format!(
            "AUC needs at least 2 classes present, found {}",
            present.len()
        )));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metrics("mean of an empty sequence".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation (n − 1 denominator); zero for one value.
pub fn sample_std(values: &[f64]) -> Result<f64> {
    let m = mean(values)?;
    if values.len() == 1 {
        return Ok(0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Ok((ss / (values.len() - 1) as f64).sqrt())
}

/// Mean over folds of every metric, per (sampler, round). Samplers keep the
/// order in which they first appear; rounds ascend.
pub fn aggregate_over_folds(records: &[MetricsRecord]) -> Result<Vec<SummaryRow>> {
    let mut folds: Vec<usize> = records.iter().map(|r| r.fold).collect();
    folds.sort_unstable();
    folds.dedup();

    let mut samplers: Vec<SamplerKind> = Vec::new();
    for r in records {
        if !samplers.contains(&r.sampler) {
            samplers.push(r.sampler);
        }
    }

    let mut rows = Vec::new();
    for &sampler in &samplers {
        let mut rounds: Vec<usize> = records
            .iter()
            .filter(|r| r.sampler == sampler)
            .map(|r| r.round)
            .collect();
        rounds.sort_unstable();
        rounds.dedup();
        for round in rounds {
            let mut group: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| r.sampler == sampler && r.round == round)
                .collect();
            group.sort_by_key(|r| r.fold);
            let group_folds: Vec<usize> = group.iter().map(|r| r.fold).collect();
            if group_folds != folds {
                return Err(Error::Metrics(format!(
                    "ragged grid: sampler {sampler} round {round} has folds {group_folds:?}, \
                     expected {folds:?}"
                )));
            }
            let avg = |f: fn(&MetricsRecord) -> f64| {
                group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64
            };
            rows.push(SummaryRow {
                sampler,
                round,
                folds: group.len(),
                test_accuracy: avg(|r| r.test_accuracy),
                test_auc: avg(|r| r.test_auc),
                std_test_accuracy: avg(|r| r.std_test_accuracy),
                std_test_auc: avg(|r| r.std_test_auc),
                train_loss: avg(|r| r.train_loss),
            });
        }
    }
    Ok(rows)
}
