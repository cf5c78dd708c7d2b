//! Comparison detectors: token probability and entropy statistics, semantic
//! entropy, sample agreement (RadFlag) and cross-model agreement.

use std::fmt;
use std::sync::Arc;

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, EntailmentModel, GenerationRequest, VisionLanguageModel};
use crate::semantic::{equivalent, GenSample, SemanticDistribution};
use crate::vcse::{shannon_entropy, VcseError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("sequence has no tokens")]
    EmptySequence,
    #[error("token {0} has no top-k log-probabilities")]
    MissingTopK(usize),
    #[error("no samples to compare against")]
    NoSamples,
    #[error("no auxiliary backend configured")]
    NoAuxiliaryBackend,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Vcse(#[from] VcseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    AvgProb,
    MaxProb,
    AvgEnt,
    MaxEnt,
    #[serde(rename = "SE")]
    Se,
    RadFlag,
    CrossCheck,
    #[serde(rename = "UniVRSE")]
    UniVrse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherMeansHallucinated,
    LowerMeansHallucinated,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::AvgProb,
        Method::MaxProb,
        Method::AvgEnt,
        Method::MaxEnt,
        Method::Se,
        Method::RadFlag,
        Method::CrossCheck,
        Method::UniVrse,
    ];

    pub fn orientation(self) -> Orientation {
        match self {
            Method::AvgProb | Method::MaxProb => Orientation::LowerMeansHallucinated,
            _ => Orientation::HigherMeansHallucinated,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::AvgProb => "AvgProb",
            Method::MaxProb => "MaxProb",
            Method::AvgEnt => "AvgEnt",
            Method::MaxEnt => "MaxEnt",
            Method::Se => "SE",
            Method::RadFlag => "RadFlag",
            Method::CrossCheck => "CrossCheck",
            Method::UniVrse => "UniVRSE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Method::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub method: Method,
    pub value: f64,
    pub orientation: Orientation,
}

impl UncertaintyScore {
    pub fn new(method: Method, value: f64) -> Self {
        Self {
            method,
            value,
            orientation: method.orientation(),
        }
    }
}

fn token_probs(sample: &GenSample) -> Result<impl Iterator<Item = f64> + '_, BaselineError> {
    if sample.token_logprobs.is_empty() {
        return Err(BaselineError::EmptySequence);
    }
    Ok(sample.token_logprobs.iter().map(|lp| lp.exp()))
}

pub fn avg_prob(sample: &GenSample) -> Result<f64, BaselineError> {
    let n = sample.token_logprobs.len() as f64;
    Ok(token_probs(sample)?.sum::<f64>() / n)
}

pub fn max_prob(sample: &GenSample) -> Result<f64, BaselineError> {
    Ok(token_probs(sample)?.fold(f64::NEG_INFINITY, f64::max))
}

/// Entropy over the top-k probabilities plus one residual outcome holding
/// whatever mass the top-k list leaves uncovered.
pub fn top_k_entropy(top_logprobs: &[f64]) -> f64 {
    let mut probs: Vec<f64> = top_logprobs.iter().map(|lp| lp.exp()).collect();
    let covered: f64 = probs.iter().sum();
    if covered > 1.0 {
        probs.iter_mut().for_each(|p| *p /= covered);
    } else {
        probs.push(1.0 - covered);
    }
    let h: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h.max(0.0)
}

fn token_entropies(sample: &GenSample) -> Result<Vec<f64>, BaselineError> {
    if sample.token_logprobs.is_empty() {
        return Err(BaselineError::EmptySequence);
    }
    (0..sample.token_logprobs.len())
        .map(|i| match sample.top_logprobs.get(i) {
            Some(top) if !top.is_empty() => Ok(top_k_entropy(top)),
            _ => Err(BaselineError::MissingTopK(i)),
        })
        .collect()
}

pub fn avg_ent(sample: &GenSample) -> Result<f64, BaselineError> {
    let h = token_entropies(sample)?;
    Ok(h.iter().sum::<f64>() / h.len() as f64)
}

pub fn max_ent(sample: &GenSample) -> Result<f64, BaselineError> {
    Ok(token_entropies(sample)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Entropy of an SPD. Unnormalized class masses are normalized first.
pub fn semantic_entropy(spd: &SemanticDistribution) -> Result<f64, BaselineError> {
    let total: f64 = spd.probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 && total > 0.0 {
        let normalized: Vec<f64> = spd.probs.iter().map(|p| p / total).collect();
        return Ok(shannon_entropy(&normalized)?);
    }
    Ok(shannon_entropy(&spd.probs)?)
}

/// Fraction of samples that disagree with the audited answer.
pub async fn radflag_score(
    original: &str,
    samples: &[GenSample],
    nli: &dyn EntailmentModel,
    context: &str,
) -> Result<f64, BaselineError> {
    if samples.is_empty() {
        return Err(BaselineError::NoSamples);
    }
    let mut agree = 0usize;
    for s in samples {
        if equivalent(nli, original, &s.text, context).await? {
            agree += 1;
        }
    }
    Ok(1.0 - agree as f64 / samples.len() as f64)
}

/// One minus the mean agreement between auxiliary-model answers and the
/// audited answer.
pub async fn cross_check_score(
    original: &str,
    others: &[String],
    nli: &dyn EntailmentModel,
    context: &str,
) -> Result<f64, BaselineError> {
    if others.is_empty() {
        return Err(BaselineError::NoAuxiliaryBackend);
    }
    let mut agree = 0usize;
    for other in others {
        if equivalent(nli, original, other, context).await? {
            agree += 1;
        }
    }
    Ok(1.0 - agree as f64 / others.len() as f64)
}

/// Ask every auxiliary VLM the same question about the same image.
pub async fn auxiliary_responses(
    auxiliary: &[Arc<dyn VisionLanguageModel>],
    png: &[u8],
    question: &str,
    temperature: f64,
) -> Result<Vec<String>, BaselineError> {
    if auxiliary.is_empty() {
        return Err(BaselineError::NoAuxiliaryBackend);
    }
    let calls = auxiliary.iter().map(|vlm| async move {
        let req = GenerationRequest::new(Some(png.to_vec()), question, temperature);
        vlm.generate(&req).await.map(|r| r.text)
    });
    Ok(try_join_all(calls).await?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockBackend, Script};
    use crate::semantic::SemanticClass;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    fn spd(probs: &[f64]) -> SemanticDistribution {
        SemanticDistribution {
            classes: probs
                .iter()
                .enumerate()
                .map(|(i, &p)| SemanticClass { id: i, representative: format!("c{i}"), member_indices: vec![i], mass: p })
                .collect(),
            probs: probs.to_vec(),
        }
    }

    #[test]
    fn probability_baselines() {
        let certain = GenSample::new("a", vec![0.0, 0.0, 0.0], 0);
        assert_eq!(avg_prob(&certain).unwrap(), 1.0);
        assert_eq!(max_prob(&certain).unwrap(), 1.0);
        let mixed = GenSample::new("a", vec![-LN_2, -(4f64.ln())], 0);
        assert_abs_diff_eq!(avg_prob(&mixed).unwrap(), 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(max_prob(&mixed).unwrap(), 0.5, epsilon = 1e-15);
        let empty = GenSample::new("", vec![], 0);
        assert!(matches!(avg_prob(&empty), Err(BaselineError::EmptySequence)));
        assert!(matches!(max_prob(&empty), Err(BaselineError::EmptySequence)));
    }

    #[test]
    fn entropy_baselines() {
        assert_eq!(top_k_entropy(&[0.0]), 0.0);
        assert_abs_diff_eq!(top_k_entropy(&[-LN_2, -LN_2]), LN_2, epsilon = 1e-12);
        let h = top_k_entropy(&[-LN_2, -(4f64.ln())]);
        assert_abs_diff_eq!(h, 1.5 * LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(h, 1.039720, epsilon = 1e-6);

        let s = GenSample::with_top_k("ab", vec![0.0, -LN_2], vec![vec![0.0], vec![-LN_2, -LN_2]], 0);
        assert_abs_diff_eq!(avg_ent(&s).unwrap(), LN_2 / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(max_ent(&s).unwrap(), LN_2, epsilon = 1e-12);

        let missing = GenSample::with_top_k("ab", vec![0.0, -LN_2], vec![vec![0.0]], 0);
        assert!(matches!(avg_ent(&missing), Err(BaselineError::MissingTopK(1))));
    }

    #[test]
    fn semantic_entropy_values() {
        assert_eq!(semantic_entropy(&spd(&[1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(semantic_entropy(&spd(&[0.5, 0.5])).unwrap(), LN_2, epsilon = 1e-12);
        let v = semantic_entropy(&spd(&[6.0 / 7.0, 1.0 / 7.0])).unwrap();
        assert_abs_diff_eq!(v, 0.410116, epsilon = 1e-6);
        // Raw masses are normalized first.
        assert_abs_diff_eq!(semantic_entropy(&spd(&[0.3, 0.05])).unwrap(), v, epsilon = 1e-12);
    }

    fn oracle() -> MockBackend {
        let mut script = Script::default();
        script.add_entailment_group(
            "Q",
            vec![vec!["yes".into(), "affirmative".into()], vec!["no".into()]],
        );
        MockBackend::new(script)
    }

    #[tokio::test]
    async fn radflag_agreement() {
        let nli = oracle();
        let yes: Vec<_> = (0..10).map(|_| GenSample::new("affirmative", vec![-0.1], 0)).collect();
        assert_eq!(radflag_score("yes", &yes, &nli, "Q").await.unwrap(), 0.0);
        let no: Vec<_> = (0..10).map(|_| GenSample::new("no", vec![-0.1], 0)).collect();
        assert_eq!(radflag_score("yes", &no, &nli, "Q").await.unwrap(), 1.0);
        let mut mix = no[..7].to_vec();
        mix.extend(yes[..3].iter().cloned());
        assert_abs_diff_eq!(radflag_score("yes", &mix, &nli, "Q").await.unwrap(), 0.7, epsilon = 1e-12);
        assert!(matches!(radflag_score("yes", &[], &nli, "Q").await, Err(BaselineError::NoSamples)));
    }

    #[tokio::test]
    async fn cross_check_agreement() {
        let nli = oracle();
        let both = vec!["yes".to_string(), "affirmative".to_string()];
        assert_eq!(cross_check_score("yes", &both, &nli, "Q").await.unwrap(), 0.0);
        let one = vec!["yes".to_string(), "no".to_string()];
        assert_eq!(cross_check_score("yes", &one, &nli, "Q").await.unwrap(), 0.5);
        assert!(matches!(
            cross_check_score("yes", &[], &nli, "Q").await,
            Err(BaselineError::NoAuxiliaryBackend)
        ));
        assert!(matches!(
            auxiliary_responses(&[], b"png", "Q", 0.1).await,
            Err(BaselineError::NoAuxiliaryBackend)
        ));
    }

    #[test]
    fn method_names_and_orientation() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()), Some(m));
        }
        assert_eq!(Method::AvgProb.orientation(), Orientation::LowerMeansHallucinated);
        assert_eq!(Method::UniVrse.orientation(), Orientation::HigherMeansHallucinated);
        assert_eq!(serde_json::to_string(&Method::UniVrse).unwrap(), "\"UniVRSE\"");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn top_k_entropy_order_invariant_and_bounded(mut lps in proptest::collection::vec(-8.0f64..0.0, 1..10)) {
                let h = top_k_entropy(&lps);
                let bound = ((lps.len() + 1) as f64).ln();
                prop_assert!(h >= 0.0 && h <= bound + 1e-9);
                lps.reverse();
                prop_assert!((top_k_entropy(&lps) - h).abs() < 1e-12);
            }
        }
    }
}
