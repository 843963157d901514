//! Utility (accuracy, F1, AUC) and group-fairness (ΔDP, ΔEO) metrics over
//! masked predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{metric} is undefined: {reason}")]
    Undefined { metric: &'static str, reason: String },
    #[error("metric inputs disagree in length")]
    Length,
}

fn check_len(lens: &[usize]) -> Result<(), MetricError> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(MetricError::Length);
    }
    Ok(())
}

/// `ŷ_i = 1` iff `p_i ≥ threshold`; ties classify positive.
pub fn binarize(probabilities: &[f64], threshold: f64) -> Vec<u8> {
    probabilities.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// Positive-prediction rate per group over the masked nodes, optionally
/// restricted to truly positive nodes (giving TPRs).
fn group_rates(
    pred: &[u8],
    sensitive: &[u8],
    mask: &[bool],
    labels: Option<&[u8]>,
    metric: &'static str,
) -> Result<[f64; 2], MetricError> {
    let mut positives = [0usize; 2];
    let mut totals = [0usize; 2];
    for i in 0..pred.len() {
        if !mask[i] || labels.is_some_and(|y| y[i] != 1) {
            continue;
        }
        let g = usize::from(sensitive[i]);
        totals[g] += 1;
        positives[g] += usize::from(pred[i]);
    }
    for g in 0..2 {
        if totals[g] == 0 {
            let what = if labels.is_some() { "positive nodes" } else { "nodes" };
            return Err(MetricError::Undefined {
                metric,
                reason: format!("group s={g} has no {what} in the mask"),
            });
        }
    }
    Ok([
        positives[0] as f64 / totals[0] as f64,
        positives[1] as f64 / totals[1] as f64,
    ])
}

/// `|P(ŷ=1 | s=0) − P(ŷ=1 | s=1)|` over the masked nodes.
pub fn demographic_parity_diff(pred: &[u8], sensitive: &[u8], mask: &[bool]) -> Result<f64, MetricError> {
    check_len(&[pred.len(), sensitive.len(), mask.len()])?;
    let r = group_rates(pred, sensitive, mask, None, "demographic parity")?;
    Ok((r[0] - r[1]).abs())
}

/// `|TPR(s=0) − TPR(s=1)|` over the masked, truly positive nodes.
pub fn equal_opportunity_diff(pred: &[u8], labels: &[u8], sensitive: &[u8], mask: &[bool]) -> Result<f64, MetricError> {
    check_len(&[pred.len(), labels.len(), sensitive.len(), mask.len()])?;
    let r = group_rates(pred, sensitive, mask, Some(labels), "equal opportunity")?;
    Ok((r[0] - r[1]).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub acc: f64,
    pub f1: f64,
    /// `None` when the mask holds a single class.
    pub auc: Option<f64>,
}

/// Area under the ROC curve as the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting ½.
pub fn auc(prob: &[f64], labels: &[u8], mask: &[bool]) -> Result<f64, MetricError> {
    check_len(&[prob.len(), labels.len(), mask.len()])?;
    let mut scored: Vec<(f64, u8)> = (0..prob.len())
        .filter(|&i| mask[i])
        .map(|i| (prob[i], labels[i]))
        .collect();
    let n_pos = scored.iter().filter(|(_, y)| *y == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined {
            metric: "auc",
            reason: "mask contains a single class".into(),
        });
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * scored[i..=j].iter().filter(|(_, y)| *y == 1).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

pub fn utility_metrics(prob: &[f64], pred: &[u8], labels: &[u8], mask: &[bool]) -> Result<Utility, MetricError> {
    check_len(&[prob.len(), pred.len(), labels.len(), mask.len()])?;
    let (mut tp, mut fp, mut fn_, mut correct, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        total += 1;
        match (pred[i], labels[i]) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => {}
        }
        correct += usize::from(pred[i] == labels[i]);
    }
    if total == 0 {
        return Err(MetricError::Undefined {
            metric: "accuracy",
            reason: "mask selects no nodes".into(),
        });
    }
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    Ok(Utility {
        acc: correct as f64 / total as f64,
        f1,
        auc: auc(prob, labels, mask).ok(),
    })
}

/// Metrics of one run on one mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub f1: f64,
    pub auc: f64,
    pub dp_diff: f64,
    pub eo_diff: f64,
    /// Positive-prediction rate for `s = 0` and `s = 1`.
    pub positive_rate: [f64; 2],
    /// True-positive rate for `s = 0` and `s = 1`.
    pub tpr: [f64; 2],
    pub n_eval: usize,
    pub seed: u64,
}

/// Scores probabilities at threshold 0.5 on `mask`.
pub fn evaluate(
    prob: &[f64],
    labels: &[u8],
    sensitive: &[u8],
    mask: &[bool],
    seed: u64,
) -> Result<MetricsReport, MetricError> {
    check_len(&[prob.len(), labels.len(), sensitive.len(), mask.len()])?;
    let pred = binarize(prob, 0.5);
    let util = utility_metrics(prob, &pred, labels, mask)?;
    let auc = auc(prob, labels, mask)?;
    let positive_rate = group_rates(&pred, sensitive, mask, None, "demographic parity")?;
    let tpr = group_rates(&pred, sensitive, mask, Some(labels), "equal opportunity")?;
    Ok(MetricsReport {
        acc: util.acc,
        f1: util.f1,
        auc,
        dp_diff: (positive_rate[0] - positive_rate[1]).abs(),
        eo_diff: (tpr[0] - tpr[1]).abs(),
        positive_rate,
        tpr,
        n_eval: mask.iter().filter(|&&m| m).count(),
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub acc: MeanStd,
    pub f1: MeanStd,
    pub auc: MeanStd,
    pub dp_diff: MeanStd,
    pub eo_diff: MeanStd,
    pub runs: usize,
}

/// Mean/std per metric. Reports are ordered by seed first, so the result
/// does not depend on the order runs finished in.
pub fn aggregate(reports: &[MetricsReport]) -> Option<Aggregate> {
    if reports.is_empty() {
        return None;
    }
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.seed);
    let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&sorted.iter().map(|r| f(r)).collect::<Vec<_>>());
    Some(Aggregate {
        acc: col(|r| r.acc),
        f1: col(|r| r.f1),
        auc: col(|r| r.auc),
        dp_diff: col(|r| r.dp_diff),
        eo_diff: col(|r| r.eo_diff),
        runs: reports.len(),
    })
}
