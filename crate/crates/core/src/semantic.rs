//! Semantic predictive distribution (SPD) estimation.
//!
//! M responses are sampled at high temperature, clustered into semantic
//! equivalence classes by bidirectional entailment, and each class receives
//! the summed sequence probability of its members.

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    semantically_equivalent, BackendError, EntailmentModel, GenerationRequest, GenerationResult, VisionLanguageModel,
    DEFAULT_MAX_TOKENS, DEFAULT_TOP_LOGPROBS,
};
use crate::perturb::{apply_weak_transform, ImageTensor, PerturbError, WeakTransformConfig};
use crate::seed;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("sequence has no tokens")]
    EmptySequence,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSample {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    /// Top-k alternative log-probabilities per token, sorted descending.
    #[serde(default)]
    pub top_logprobs: Vec<Vec<f64>>,
    pub seq_logprob: f64,
    pub transform_seed: u64,
}

impl GenSample {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>, transform_seed: u64) -> Self {
        let top_logprobs = token_logprobs.iter().map(|&lp| vec![lp]).collect();
        Self::with_top_k(text, token_logprobs, top_logprobs, transform_seed)
    }

    pub fn with_top_k(
        text: impl Into<String>,
        token_logprobs: Vec<f64>,
        top_logprobs: Vec<Vec<f64>>,
        transform_seed: u64,
    ) -> Self {
        let seq_logprob = token_logprobs.iter().sum();
        Self {
            text: text.into(),
            token_logprobs,
            top_logprobs,
            seq_logprob,
            transform_seed,
        }
    }

    pub fn from_result(result: &GenerationResult, transform_seed: u64) -> Self {
        Self::with_top_k(
            result.text.clone(),
            result.logprobs(),
            result.tokens.iter().map(|t| t.top.clone()).collect(),
            transform_seed,
        )
    }
}

/// Product of token probabilities, or their geometric mean when
/// `length_normalize` is set.
pub fn sequence_prob(sample: &GenSample, length_normalize: bool) -> Result<f64, SemanticError> {
    if sample.token_logprobs.is_empty() {
        return Err(SemanticError::EmptySequence);
    }
    let logprob = if length_normalize {
        sample.seq_logprob / sample.token_logprobs.len() as f64
    } else {
        sample.seq_logprob
    };
    Ok(logprob.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticClass {
    pub id: usize,
    /// Text of the first member.
    pub representative: String,
    pub member_indices: Vec<usize>,
    /// Summed sequence probability of the members.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDistribution {
    pub classes: Vec<SemanticClass>,
    pub probs: Vec<f64>,
}

impl SemanticDistribution {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn representatives(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.representative.as_str()).collect()
    }
}

/// Equivalence test used by clustering. Identical strings are equivalent
/// without a backend call; an empty response only matches another empty one.
pub async fn equivalent(nli: &dyn EntailmentModel, a: &str, b: &str, context: &str) -> Result<bool, BackendError> {
    let (a_trim, b_trim) = (a.trim(), b.trim());
    if a_trim == b_trim {
        return Ok(true);
    }
    if a_trim.is_empty() || b_trim.is_empty() {
        return Ok(false);
    }
    semantically_equivalent(nli, a, b, context).await
}

/// Sequential clustering: each sample joins the first class whose
/// representative it is equivalent to, otherwise it founds a new class.
/// Class masses are left at zero; see [`aggregate`].
pub async fn cluster_responses(
    samples: &[GenSample],
    nli: &dyn EntailmentModel,
    context: &str,
) -> Result<Vec<SemanticClass>, SemanticError> {
    if samples.is_empty() {
        return Err(SemanticError::InvalidConfig("no samples to cluster".into()));
    }
    let mut classes: Vec<SemanticClass> = Vec::new();
    'samples: for (i, sample) in samples.iter().enumerate() {
        for class in classes.iter_mut() {
            if equivalent(nli, &class.representative, &sample.text, context).await? {
                class.member_indices.push(i);
                continue 'samples;
            }
        }
        classes.push(SemanticClass {
            id: classes.len(),
            representative: sample.text.clone(),
            member_indices: vec![i],
            mass: 0.0,
        });
    }
    Ok(classes)
}

/// Fill in class masses and turn them into a distribution.
///
/// Returns `(distribution, degenerate)`. When every sequence probability
/// underflows to zero the distribution falls back to uniform and
/// `degenerate` is set. With `raw_masses` the probabilities are the masses
/// themselves and need not sum to one.
pub fn aggregate(
    mut classes: Vec<SemanticClass>,
    samples: &[GenSample],
    length_normalize: bool,
    raw_masses: bool,
) -> Result<(SemanticDistribution, bool), SemanticError> {
    for class in classes.iter_mut() {
        class.mass = class
            .member_indices
            .iter()
            .map(|&i| sequence_prob(&samples[i], length_normalize))
            .sum::<Result<f64, _>>()?;
    }
    let total: f64 = classes.iter().map(|c| c.mass).sum();
    let degenerate = !(total > 0.0);
    let probs = if degenerate {
        log::warn!("all sequence probabilities underflowed; using a uniform distribution over classes");
        vec![1.0 / classes.len() as f64; classes.len()]
    } else if raw_masses {
        classes.iter().map(|c| c.mass).collect()
    } else {
        classes.iter().map(|c| c.mass / total).collect()
    };
    Ok((SemanticDistribution { classes, probs }, degenerate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdConfig {
    pub samples: usize,
    pub temperature: f64,
    pub length_normalize: bool,
    pub raw_masses: bool,
    pub max_tokens: u32,
    pub top_logprobs: u32,
}

impl Default for SpdConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            temperature: 1.0,
            length_normalize: false,
            raw_masses: false,
            max_tokens: DEFAULT_MAX_TOKENS,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
        }
    }
}

impl SpdConfig {
    pub fn validate(&self) -> Result<(), SemanticError> {
        if self.samples < 2 {
            return Err(SemanticError::InvalidConfig(format!("M = {} but at least 2 samples are needed", self.samples)));
        }
        if !(self.temperature > 0.0) {
            return Err(SemanticError::InvalidConfig(format!("temperature {} must be > 0", self.temperature)));
        }
        Ok(())
    }
}

/// Per-sample transform seed and the PNG sent to the VLM. Without a weak
/// transform every sample sees the same image.
pub fn sample_inputs(
    image: &ImageTensor,
    weak: Option<&WeakTransformConfig>,
    samples: usize,
    branch_seed: u64,
) -> Result<Vec<(u64, Vec<u8>)>, SemanticError> {
    let plain = if weak.is_none() { Some(image.to_png()) } else { None };
    (0..samples)
        .map(|i| {
            let s = seed::derive(branch_seed, "sample", i as u64);
            let png = match (weak, &plain) {
                (Some(cfg), _) => apply_weak_transform(image, cfg, s)?.to_png(),
                (None, Some(png)) => png.clone(),
                (None, None) => unreachable!(),
            };
            Ok((s, png))
        })
        .collect()
}

/// Samples, clusters and the resulting distribution for one image branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdEstimate {
    pub samples: Vec<GenSample>,
    pub distribution: SemanticDistribution,
    pub degenerate: bool,
}

impl SpdEstimate {
    /// Cluster already drawn samples.
    pub async fn from_samples(
        samples: Vec<GenSample>,
        question: &str,
        cfg: &SpdConfig,
        nli: &dyn EntailmentModel,
    ) -> Result<Self, SemanticError> {
        let classes = cluster_responses(&samples, nli, question).await?;
        let (distribution, degenerate) = aggregate(classes, &samples, cfg.length_normalize, cfg.raw_masses)?;
        Ok(Self {
            samples,
            distribution,
            degenerate,
        })
    }
}

/// Draw `cfg.samples` responses for `question` on `image` (each with its own
/// weak transform when `weak` is set) and estimate their SPD.
pub async fn estimate_spd(
    image: &ImageTensor,
    question: &str,
    cfg: &SpdConfig,
    weak: Option<&WeakTransformConfig>,
    branch_seed: u64,
    vlm: &dyn VisionLanguageModel,
    nli: &dyn EntailmentModel,
) -> Result<SpdEstimate, SemanticError> {
    cfg.validate()?;
    let inputs = sample_inputs(image, weak, cfg.samples, branch_seed)?;
    let calls = inputs.into_iter().map(|(s, png)| async move {
        let req = GenerationRequest {
            image: Some(png),
            prompt: question.to_string(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            top_logprobs: cfg.top_logprobs,
            seed: Some(s),
        };
        let result = vlm.generate(&req).await?;
        Ok::<_, BackendError>(GenSample::from_result(&result, s))
    });
    let samples = try_join_all(calls).await?;
    SpdEstimate::from_samples(samples, question, cfg, nli).await
}
