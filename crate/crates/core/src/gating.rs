//! Softmax confidence and the low-confidence query set.

use serde::{Deserialize, Serialize};

use crate::corpus::ColumnId;
use crate::error::{Error, Result};

pub const DEFAULT_DELTA: f64 = 0.9;

/// Largest softmax probability of `logits` (the infinity norm of the
/// softmax vector). Uses max-subtraction so large logits do not overflow.
pub fn confidence(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Runtime("confidence of an empty logits vector".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Runtime("confidence of non-finite logits".into()));
    }
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    Ok(1.0 / sum)
}

/// Confidence threshold in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ConfidenceThreshold(f64);

impl ConfidenceThreshold {
    pub fn new(delta: f64) -> Result<Self> {
        if delta > 0.0 && delta <= 1.0 {
            Ok(ConfidenceThreshold(delta))
        } else {
            Err(Error::config(format!("confidence threshold must be in (0, 1], got {delta}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for ConfidenceThreshold {
    fn default() -> Self {
        ConfidenceThreshold(DEFAULT_DELTA)
    }
}

impl TryFrom<f64> for ConfidenceThreshold {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        ConfidenceThreshold::new(v)
    }
}

impl From<ConfidenceThreshold> for f64 {
    fn from(t: ConfidenceThreshold) -> f64 {
        t.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCandidate {
    pub column: ColumnId,
    pub predicted: usize,
    pub logits: Vec<f64>,
    pub confidence: f64,
}

impl QueryCandidate {
    pub fn from_logits(column: ColumnId, logits: Vec<f64>) -> Result<Self> {
        let confidence = confidence(&logits)?;
        let predicted = argmax(&logits);
        Ok(QueryCandidate {
            column,
            predicted,
            logits,
            confidence,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Keeps candidates with confidence strictly below `delta`, in input order.
pub fn build_query_set(
    candidates: Vec<QueryCandidate>,
    delta: ConfidenceThreshold,
) -> Vec<QueryCandidate> {
    candidates
        .into_iter()
        .filter(|c| c.confidence < delta.get())
        .collect()
}
