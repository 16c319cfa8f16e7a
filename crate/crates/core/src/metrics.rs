//! Classification metrics: accuracy, macro-averaged F1 and macro-averaged
//! one-vs-rest ROC AUC (rank/trapezoid form with midpoint tie handling).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Metrics of one evaluation run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub macro_f1: f64,
    /// Absent when every one-vs-rest split is degenerate.
    pub macro_auc: Option<f64>,
    /// Classes whose F1 was pinned to 0 because they had neither predicted
    /// nor actual positives.
    pub degenerate_f1_classes: Vec<usize>,
}

/// Mean and standard deviation of per-fold metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<Metrics>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub mean_auc: Option<f64>,
    pub std_auc: Option<f64>,
}

impl MetricsReport {
    pub fn aggregate(per_fold: Vec<Metrics>) -> Self {
        let mean_std = |xs: &[f64]| -> (f64, f64) {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let accs: Vec<f64> = per_fold.iter().map(|m| m.acc).collect();
        let f1s: Vec<f64> = per_fold.iter().map(|m| m.macro_f1).collect();
        let aucs: Vec<f64> = per_fold.iter().filter_map(|m| m.macro_auc).collect();
        let (mean_acc, std_acc) = mean_std(&accs);
        let (mean_f1, std_f1) = mean_std(&f1s);
        let (mean_auc, std_auc) = if aucs.len() == per_fold.len() && !aucs.is_empty() {
            let (m, s) = mean_std(&aucs);
            (Some(m), Some(s))
        } else {
            (None, None)
        };
        MetricsReport { per_fold, mean_acc, std_acc, mean_f1, std_f1, mean_auc, std_auc }
    }
}

/// Midpoint ranks of `scores` (1-based; tied scores share their average
/// rank).
fn midpoint_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores").then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest ROC AUC for `class` via the rank statistic (equal to the
/// trapezoidal area with tied scores grouped).
pub fn roc_auc_ovr(scores: &Matrix<f64>, labels: &[usize], class: usize) -> Result<f64> {
    let col: Vec<f64> = (0..scores.rows()).map(|r| scores[(r, class)]).collect();
    let pos = labels.iter().filter(|&&y| y == class).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    let ranks = midpoint_ranks(&col);
    let pos_rank_sum: f64 = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y == class)
        .map(|(i, _)| ranks[i])
        .sum();
    let p = pos as f64;
    let n = neg as f64;
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Computes accuracy, macro-F1 and macro-AUC from a `T x C` score matrix
/// whose rows sum to one.
pub fn evaluate_metrics(scores: &Matrix<f64>, labels: &[usize], classes: usize) -> Result<Metrics> {
    let t = scores.rows();
    if t == 0 {
        return Err(Error::EmptyInput("evaluate_metrics of zero rows".into()));
    }
    if labels.len() != t || scores.cols() != classes {
        return Err(Error::DimensionMismatch(format!(
            "evaluate_metrics: {t}x{} scores vs {} labels / {classes} classes",
            scores.cols(),
            labels.len()
        )));
    }
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
    }
    for r in 0..t {
        let s: f64 = scores.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::NonDistributionInput(format!("score row {r} sums to {s}")));
        }
    }

    let predictions: Vec<usize> = (0..t).map(|r| scores.argmax_row(r)).collect();
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    let acc = correct as f64 / t as f64;

    let mut f1_sum = 0.0;
    let mut degenerate_f1_classes = Vec::new();
    for c in 0..classes {
        let tp = predictions
            .iter()
            .zip(labels)
            .filter(|&(&p, &y)| p == c && y == c)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(labels)
            .filter(|&(&p, &y)| p == c && y != c)
            .count() as f64;
        let fnn = predictions
            .iter()
            .zip(labels)
            .filter(|&(&p, &y)| p != c && y == c)
            .count() as f64;
        if tp + fp == 0.0 && tp + fnn == 0.0 {
            degenerate_f1_classes.push(c);
            continue; // contributes 0
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    let macro_f1 = f1_sum / classes as f64;

    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for c in 0..classes {
        match roc_auc_ovr(scores, labels, c) {
            Ok(a) => {
                auc_sum += a;
                auc_count += 1;
            }
            Err(Error::DegenerateLabels) => {}
            Err(e) => return Err(e),
        }
    }
    let macro_auc = if auc_count == classes {
        Some(auc_sum / classes as f64)
    } else {
        None
    };

    Ok(Metrics { acc, macro_f1, macro_auc, degenerate_f1_classes })
}
