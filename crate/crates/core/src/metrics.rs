//! Classification metrics with reject-aware reporting.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::Label;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectPolicy {
    /// Rejected nodes are dropped from every rate; coverage reports how many.
    ExcludeAndReportCoverage,
    /// Rejected nodes count as misclassified (a miss for their true class).
    #[default]
    CountAsError,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinorityRule {
    /// Classes whose training count is below the mean count.
    #[default]
    BelowMeanCount,
    /// The `⌈q·C⌉` classes with the smallest training counts.
    BottomQuantile(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// True-label count among the nodes the rates are computed over.
    pub support: Vec<usize>,
}

/// Rates are `None` when no node is left to evaluate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub minority_recall: Option<f64>,
    pub minority_classes: Vec<usize>,
    pub per_class: PerClass,
    /// `confusion[true][pred]` over covered nodes.
    pub confusion: Vec<Vec<usize>>,
    pub coverage: f64,
    pub num_nodes: usize,
    pub num_rejected: usize,
    pub reject_policy: RejectPolicy,
}

pub fn minority_classes(train_counts: &[usize], rule: MinorityRule) -> Vec<usize> {
    let c = train_counts.len();
    if c == 0 {
        return Vec::new();
    }
    match rule {
        MinorityRule::BelowMeanCount => {
            let mean = train_counts.iter().sum::<usize>() as f64 / c as f64;
            (0..c).filter(|&k| (train_counts[k] as f64) < mean).collect()
        }
        MinorityRule::BottomQuantile(q) => {
            let take = ((q.clamp(0.0, 1.0) * c as f64).ceil() as usize).min(c);
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by_key(|&k| (train_counts[k], k));
            let mut out = order[..take].to_vec();
            out.sort_unstable();
            out
        }
    }
}

/// Averages are taken over classes with nonzero support.
pub fn evaluate(
    truth: &[usize],
    pred: &[Label],
    num_classes: usize,
    minority: &[usize],
    policy: RejectPolicy,
) -> Result<EvalReport, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { truth: truth.len(), pred: pred.len() });
    }
    let check = |class: usize| {
        if class >= num_classes {
            Err(MetricsError::ClassOutOfRange { class, num_classes })
        } else {
            Ok(())
        }
    };
    let c = num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    let mut support = vec![0usize; c];
    let mut rejected = 0;
    for (&t, &p) in truth.iter().zip(pred) {
        check(t)?;
        match p {
            Label::Class(k) => {
                check(k)?;
                confusion[t][k] += 1;
                support[t] += 1;
            }
            Label::Reject => {
                rejected += 1;
                if policy == RejectPolicy::CountAsError {
                    support[t] += 1;
                }
            }
        }
    }
    for &m in minority {
        check(m)?;
    }
    let n = truth.len();
    let evaluated: usize = support.iter().sum();
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let predicted: Vec<usize> = (0..c).map(|k| (0..c).map(|t| confusion[t][k]).sum()).collect();

    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision: Vec<f64> = (0..c).map(|k| ratio(confusion[k][k], predicted[k])).collect();
    let recall: Vec<f64> = (0..c).map(|k| ratio(confusion[k][k], support[k])).collect();
    let f1: Vec<f64> = (0..c)
        .map(|k| {
            let s = precision[k] + recall[k];
            if s == 0.0 {
                0.0
            } else {
                2.0 * precision[k] * recall[k] / s
            }
        })
        .collect();

    let present: Vec<usize> = (0..c).filter(|&k| support[k] > 0).collect();
    let mean_over = |xs: &[f64], classes: &[usize]| {
        if classes.is_empty() {
            None
        } else {
            Some(classes.iter().map(|&k| xs[k]).sum::<f64>() / classes.len() as f64)
        }
    };
    let minority_present: Vec<usize> = minority.iter().copied().filter(|&k| support[k] > 0).collect();

    Ok(EvalReport {
        accuracy: (evaluated > 0).then(|| correct as f64 / evaluated as f64),
        balanced_accuracy: mean_over(&recall, &present),
        macro_f1: mean_over(&f1, &present),
        minority_recall: mean_over(&recall, &minority_present),
        minority_classes: minority.to_vec(),
        per_class: PerClass { precision, recall, f1, support },
        confusion,
        coverage: if n == 0 { 1.0 } else { (n - rejected) as f64 / n as f64 },
        num_nodes: n,
        num_rejected: rejected,
        reject_policy: policy,
    })
}

pub fn write_metrics_json(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct PerClassRow {
    class: usize,
    precision: f64,
    recall: f64,
    f1: f64,
    train_count: usize,
}

pub fn write_per_class_csv(path: &Path, report: &EvalReport, train_counts: &[usize]) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    let pc = &report.per_class;
    for k in 0..pc.f1.len() {
        w.serialize(PerClassRow {
            class: k,
            precision: pc.precision[k],
            recall: pc.recall[k],
            f1: pc.f1[k],
            train_count: train_counts.get(k).copied().unwrap_or(0),
        })?;
    }
    w.flush()?;
    Ok(())
}
