//! Evaluation metrics over finished runs.
//!
//! Conventions, frozen here so every consumer agrees:
//!
//! * predictions are the argmax of the final distribution (ties to the
//!   lowest label index);
//! * macro-F1 averages per-class F1 over *all* classes, counting a class
//!   with no predictions and no gold occurrences as 0;
//! * micro-F1 over single-label classification equals accuracy;
//! * log loss is the mean negative natural log of the probability assigned
//!   to the gold label, clipped below at [`LOG_LOSS_CLIP`];
//! * the Brier score averages the squared error against the one-hot gold
//!   vector over classes ([`BrierConvention::Mean`], the default); the
//!   summed variant is available behind [`BrierConvention::Sum`];
//! * per-step dynamics report the mean, step-over-step delta (zero at step
//!   1), and standard error (sample standard deviation over the square root
//!   of n; zero when n < 2) of entropy and variance.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::{LabelSpace, ProbError, ProbabilityVector};

/// Lower clip for the gold-label probability inside the log loss.
pub const LOG_LOSS_CLIP: f64 = 1e-10;

/// Errors from metric computation.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("record {id}: expected {expected} step distributions, got {got}")]
    LengthMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("record {id}: gold label index {gold} out of range for {k} classes")]
    GoldOutOfRange { id: String, gold: usize, k: usize },
    #[error("record {id}: {source}")]
    Prob {
        id: String,
        #[source]
        source: ProbError,
    },
}

/// The evaluation-relevant slice of one finished instance run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub gold_label_index: usize,
    pub final_distribution: ProbabilityVector,
    /// Distribution after each circulation step (one entry for `single`).
    pub per_step_distributions: Vec<ProbabilityVector>,
    /// Whether any call in the run was substituted by the degradation
    /// policy.
    pub degraded: bool,
}

/// Which Brier aggregation to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BrierConvention {
    /// Mean squared error over classes (default).
    Mean,
    /// Sum of squared errors over classes.
    Sum,
}

impl fmt::Display for BrierConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BrierConvention::Mean => "mean",
            BrierConvention::Sum => "sum",
        })
    }
}

impl FromStr for BrierConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "mean" => Ok(BrierConvention::Mean),
            "sum" => Ok(BrierConvention::Sum),
            other => Err(format!(
                "unknown brier convention {other:?}; expected mean or sum"
            )),
        }
    }
}

fn check_gold(record: &EvalRecord, k: usize) -> Result<(), MetricsError> {
    if record.gold_label_index >= k {
        return Err(MetricsError::GoldOutOfRange {
            id: record.instance_id.clone(),
            gold: record.gold_label_index,
            k,
        });
    }
    Ok(())
}

fn predicted_index(record: &EvalRecord) -> Result<usize, MetricsError> {
    record
        .final_distribution
        .argmax_index()
        .map_err(|source| MetricsError::Prob {
            id: record.instance_id.clone(),
            source,
        })
}

/// Per-class true positives, false positives, and false negatives under
/// argmax prediction.
fn confusion_counts(
    records: &[EvalRecord],
    k: usize,
) -> Result<Vec<(usize, usize, usize)>, MetricsError> {
    let mut counts = vec![(0usize, 0usize, 0usize); k];
    for record in records {
        check_gold(record, k)?;
        let predicted = predicted_index(record)?;
        if predicted >= k {
            return Err(MetricsError::LengthMismatch {
                id: record.instance_id.clone(),
                expected: k,
                got: record.final_distribution.k(),
            });
        }
        if predicted == record.gold_label_index {
            counts[predicted].0 += 1;
        } else {
            counts[predicted].1 += 1;
            counts[record.gold_label_index].2 += 1;
        }
    }
    Ok(counts)
}

/// Macro-averaged F1 over all classes of the label space.
pub fn macro_f1(records: &[EvalRecord], space: &LabelSpace) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let counts = confusion_counts(records, space.k())?;
    let sum: f64 = counts
        .iter()
        .map(|&(tp, fp, fn_)| {
            let denominator = 2 * tp + fp + fn_;
            if denominator == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denominator as f64
            }
        })
        .sum();
    Ok(sum / space.k() as f64)
}

/// Micro-averaged F1; for single-label classification this equals accuracy.
pub fn micro_f1(records: &[EvalRecord], space: &LabelSpace) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let counts = confusion_counts(records, space.k())?;
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0usize, 0usize, 0usize), |acc, &(tp, fp, fn_)| {
            (acc.0 + tp, acc.1 + fp, acc.2 + fn_)
        });
    let denominator = 2 * tp + fp + fn_;
    if denominator == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / denominator as f64)
}

/// Mean negative log-probability of the gold label, clipped below at
/// [`LOG_LOSS_CLIP`] so a hard zero stays finite.
pub fn log_loss(records: &[EvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut total = 0.0;
    for record in records {
        let k = record.final_distribution.k();
        check_gold(record, k)?;
        if record.final_distribution.is_placeholder() {
            return Err(MetricsError::Prob {
                id: record.instance_id.clone(),
                source: ProbError::PlaceholderInput,
            });
        }
        let p =
            record.final_distribution.entries()[record.gold_label_index].clamp(LOG_LOSS_CLIP, 1.0);
        total -= p.ln();
    }
    Ok(total / records.len() as f64)
}

/// Brier score against the one-hot gold vector, averaged over records.
pub fn brier(records: &[EvalRecord], convention: BrierConvention) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut total = 0.0;
    for record in records {
        let k = record.final_distribution.k();
        check_gold(record, k)?;
        if record.final_distribution.is_placeholder() {
            return Err(MetricsError::Prob {
                id: record.instance_id.clone(),
                source: ProbError::PlaceholderInput,
            });
        }
        let squared_error: f64 = record
            .final_distribution
            .entries()
            .iter()
            .enumerate()
            .map(|(c, &p)| {
                let y = if c == record.gold_label_index {
                    1.0
                } else {
                    0.0
                };
                (p - y).powi(2)
            })
            .sum();
        total += match convention {
            BrierConvention::Mean => squared_error / k as f64,
            BrierConvention::Sum => squared_error,
        };
    }
    Ok(total / records.len() as f64)
}

/// Mean and standard error (sample standard deviation over sqrt n; zero when
/// n < 2).
fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let sample_variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (sample_variance / n).sqrt())
}

/// Uncertainty statistics at one circulation step (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStat {
    pub step: usize,
    pub mean_entropy: f64,
    /// Change versus the previous step; exactly zero at step 1.
    pub delta_entropy: f64,
    pub se_entropy: f64,
    pub mean_variance: f64,
    pub delta_variance: f64,
    pub se_variance: f64,
}

/// Per-step uncertainty dynamics across a set of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub n_records: usize,
    pub steps: Vec<StepStat>,
}

/// Computes entropy and variance dynamics over the per-step distributions.
/// Every record must carry exactly `n_steps` step distributions.
pub fn step_stats(records: &[EvalRecord], n_steps: usize) -> Result<StepStats, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    for record in records {
        if record.per_step_distributions.len() != n_steps {
            return Err(MetricsError::LengthMismatch {
                id: record.instance_id.clone(),
                expected: n_steps,
                got: record.per_step_distributions.len(),
            });
        }
    }
    let mut steps = Vec::with_capacity(n_steps);
    let mut prev: Option<(f64, f64)> = None;
    for s in 0..n_steps {
        let mut entropies = Vec::with_capacity(records.len());
        let mut variances = Vec::with_capacity(records.len());
        for record in records {
            let dist = &record.per_step_distributions[s];
            entropies.push(dist.entropy().map_err(|source| MetricsError::Prob {
                id: record.instance_id.clone(),
                source,
            })?);
            variances.push(dist.variance().map_err(|source| MetricsError::Prob {
                id: record.instance_id.clone(),
                source,
            })?);
        }
        let (mean_entropy, se_entropy) = mean_and_se(&entropies);
        let (mean_variance, se_variance) = mean_and_se(&variances);
        let (delta_entropy, delta_variance) = match prev {
            None => (0.0, 0.0),
            Some((pe, pv)) => (mean_entropy - pe, mean_variance - pv),
        };
        prev = Some((mean_entropy, mean_variance));
        steps.push(StepStat {
            step: s + 1,
            mean_entropy,
            delta_entropy,
            se_entropy,
            mean_variance,
            delta_variance,
            se_variance,
        });
    }
    Ok(StepStats {
        n_records: records.len(),
        steps,
    })
}

/// Unweighted average of several step-stat series (one per dataset): means
/// and deltas average directly, and the reported standard error is the mean
/// of the per-dataset standard errors.
pub fn cross_dataset_average(all: &[StepStats]) -> Result<StepStats, MetricsError> {
    let Some(first) = all.first() else {
        return Err(MetricsError::EmptyRecords);
    };
    let n_steps = first.steps.len();
    for stats in all {
        if stats.steps.len() != n_steps {
            return Err(MetricsError::LengthMismatch {
                id: "cross-dataset".to_string(),
                expected: n_steps,
                got: stats.steps.len(),
            });
        }
    }
    let datasets = all.len() as f64;
    let steps = (0..n_steps)
        .map(|s| StepStat {
            step: s + 1,
            mean_entropy: all.iter().map(|x| x.steps[s].mean_entropy).sum::<f64>() / datasets,
            delta_entropy: all.iter().map(|x| x.steps[s].delta_entropy).sum::<f64>() / datasets,
            se_entropy: all.iter().map(|x| x.steps[s].se_entropy).sum::<f64>() / datasets,
            mean_variance: all.iter().map(|x| x.steps[s].mean_variance).sum::<f64>() / datasets,
            delta_variance: all.iter().map(|x| x.steps[s].delta_variance).sum::<f64>() / datasets,
            se_variance: all.iter().map(|x| x.steps[s].se_variance).sum::<f64>() / datasets,
        })
        .collect();
    Ok(StepStats {
        n_records: all.iter().map(|x| x.n_records).sum(),
        steps,
    })
}

/// The `value(+delta)` cell layout used by the dynamics tables, e.g.
/// `1.0123(+0.0000)` at step 1 or `0.9450(-0.0673)` later.
pub fn format_value_delta(value: f64, delta: f64) -> String {
    format!("{value:.4}({delta:+.4})")
}
