//! Detection metrics: AUC over binarized labels and AUA, the area under the
//! curve of mean hallucination degree among the most confident predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{Orientation, UncertaintyScore};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC needs at least one correct and one hallucinated sample")]
    SingleClass,
    #[error("no samples")]
    Empty,
    #[error("confidence for {0} is not finite")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    /// Higher means more confident the response is correct.
    pub confidence: f64,
    pub alpha_h: f64,
    pub binary_halluc: bool,
}

/// Map a score onto a common "higher = more confident" axis.
pub fn normalize_confidence(score: &UncertaintyScore) -> f64 {
    match score.method.orientation() {
        Orientation::HigherMeansHallucinated => -score.value,
        Orientation::LowerMeansHallucinated => score.value,
    }
}

/// Hallucinated iff `alpha_h > threshold`.
pub fn binarize_label(alpha_h: f64, threshold: f64) -> bool {
    alpha_h > threshold
}

fn check_finite(samples: &[ScoredSample]) -> Result<(), MetricsError> {
    match samples.iter().find(|s| !s.confidence.is_finite()) {
        Some(s) => Err(MetricsError::NonFinite(s.id.clone())),
        None => Ok(()),
    }
}

/// Probability that a random correct sample is more confident than a random
/// hallucinated one, ties counting half.
pub fn auc(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    check_finite(samples)?;
    let mut halluc: Vec<f64> = samples.iter().filter(|s| s.binary_halluc).map(|s| s.confidence).collect();
    let correct: Vec<f64> = samples.iter().filter(|s| !s.binary_halluc).map(|s| s.confidence).collect();
    if halluc.is_empty() || correct.is_empty() {
        return Err(MetricsError::SingleClass);
    }
    halluc.sort_by(f64::total_cmp);
    // Twice the credit, so that everything stays integral until the end.
    let mut doubled: u64 = 0;
    for &c in &correct {
        let below = halluc.partition_point(|&h| h < c) as u64;
        let up_to = halluc.partition_point(|&h| h <= c) as u64;
        doubled += 2 * below + (up_to - below);
    }
    let pairs = correct.len() as u64 * halluc.len() as u64;
    Ok(doubled as f64 / (2 * pairs) as f64)
}

/// Mean over X = 1..100 of the mean `alpha_h` among the top ⌈X·n/100⌉ most
/// confident samples (ties broken by id).
pub fn aua(samples: &[ScoredSample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_finite(samples)?;
    let mut ranked: Vec<&ScoredSample> = samples.iter().collect();
    ranked.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then_with(|| a.id.cmp(&b.id)));
    let mut prefix = Vec::with_capacity(ranked.len() + 1);
    prefix.push(0.0);
    for s in &ranked {
        prefix.push(prefix.last().unwrap() + s.alpha_h);
    }
    let n = ranked.len();
    let total: f64 = (1..=100)
        .map(|x| {
            let k = (x * n).div_ceil(100);
            prefix[k] / k as f64
        })
        .sum();
    Ok(total / 100.0)
}
