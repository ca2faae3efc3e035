//! Confusion bookkeeping, percentage metrics and the latency benchmark.
//!
//! Malignant is the positive class; a sample is predicted positive when its
//! probability is at least the threshold.

mod latency;

pub use latency::{benchmark_latency, LatencyReport, MIN_TIMED_RUNS};

use serde::{Deserialize, Serialize};

use crate::data::Magnification;
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts with the roles of the two classes exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

/// Tallies predictions (`prob >= threshold` means malignant) against labels
/// (1 = malignant).
pub fn confusion_from_predictions(
    probs: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ConfusionCounts> {
    if probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} probabilities but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::invalid("no predictions to evaluate"));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &y)) in probs.iter().zip(labels).enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "probability {p} at index {i} is outside [0, 1]"
            )));
        }
        let positive = p >= threshold;
        match (y, positive) {
            (1, true) => c.tp += 1,
            (1, false) => c.fn_ += 1,
            (0, true) => c.fp += 1,
            (0, false) => c.tn += 1,
            (other, _) => {
                return Err(Error::invalid(format!(
                    "label {other} at index {i} is not 0 or 1"
                )))
            }
        }
    }
    Ok(c)
}

/// A percentage that may come from a zero denominator, in which case the
/// value is 0 and `degenerate` is set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize) -> Ratio {
    if den == 0 {
        Ratio {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Ratio {
            value: 100.0 * num as f64 / den as f64,
            degenerate: false,
        }
    }
}

/// 100 * (tp + tn) / total.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    if c.total() == 0 {
        return Err(Error::UndefinedMetric("accuracy of zero samples"));
    }
    Ok(100.0 * (c.tp + c.tn) as f64 / c.total() as f64)
}

/// 100 * tp / (tp + fp).
pub fn precision(c: &ConfusionCounts) -> Ratio {
    ratio(c.tp, c.tp + c.fp)
}

/// 100 * tp / (tp + fn).
pub fn recall(c: &ConfusionCounts) -> Ratio {
    ratio(c.tp, c.tp + c.fn_)
}

/// Harmonic mean of two percentages; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Rounds to two decimals, ties to even.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round_ties_even() / 100.0
}

/// Evaluation summary for one magnification; percentages carry two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub magnification: Magnification,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(magnification: Magnification, counts: ConfusionCounts) -> Result<Self> {
        let acc = accuracy(&counts)?;
        let p = precision(&counts).value;
        let r = recall(&counts).value;
        Ok(Self {
            magnification,
            accuracy: round2(acc),
            precision: round2(p),
            recall: round2(r),
            f1: round2(f1(p, r)),
            counts,
        })
    }

    pub fn from_predictions(
        magnification: Magnification,
        probs: &[f64],
        labels: &[u8],
        threshold: f64,
    ) -> Result<Self> {
        Self::from_counts(
            magnification,
            confusion_from_predictions(probs, labels, threshold)?,
        )
    }

    /// Names of metrics whose denominator was zero.
    pub fn degenerate(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if precision(&self.counts).degenerate {
            out.push("precision");
        }
        if recall(&self.counts).degenerate {
            out.push("recall");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
