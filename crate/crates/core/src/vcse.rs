//! Vision-conditioned semantic entropy.
//!
//! Two SPDs are estimated, one from the image and one from a noise-distorted
//! copy. Their class sets are aligned, the distributions are contrasted as
//! `softmax((1 + λ)·p − λ·p′)`, and the Shannon entropy of the result is the
//! hallucination score. Answers that survive the distortion unchanged are
//! driven by language priors; the contrast flattens them and raises the
//! entropy.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::mock::Script;
use crate::backends::{BackendError, EntailmentModel, VisionLanguageModel};
use crate::perturb::{apply_distortion, image_digest, DistortionConfig, ImageTensor, PerturbError, WeakTransformConfig};
use crate::seed;
use crate::semantic::{equivalent, estimate_spd, sample_inputs, SemanticDistribution, SemanticError, SpdConfig, SpdEstimate};

#[derive(Debug, Error)]
pub enum VcseError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("lambda must be >= 0, got {0}")]
    InvalidLambda(f64),
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("calibration labels contain a single class")]
    SingleClassLabels,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

/// Which branches get per-sample weak transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Both,
    OriginalOnly,
    DistortedOnly,
    None,
}

impl Placement {
    pub fn original(self) -> bool {
        matches!(self, Placement::Both | Placement::OriginalOnly)
    }

    pub fn distorted(self) -> bool {
        matches!(self, Placement::Both | Placement::DistortedOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcseConfig {
    pub spd: SpdConfig,
    pub lambda: f64,
    pub weak: WeakTransformConfig,
    pub distortion: DistortionConfig,
    pub placement: Placement,
}

impl Default for VcseConfig {
    fn default() -> Self {
        Self {
            spd: SpdConfig::default(),
            lambda: 1.0,
            weak: WeakTransformConfig::default(),
            distortion: DistortionConfig::default(),
            placement: Placement::Both,
        }
    }
}

impl VcseConfig {
    pub fn validate(&self) -> Result<(), VcseError> {
        self.spd.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(VcseError::InvalidLambda(self.lambda));
        }
        self.weak.validate()?;
        self.distortion.validate()?;
        Ok(())
    }
}

/// Two SPDs expressed over one shared list of classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub representatives: Vec<String>,
    pub p_a: Vec<f64>,
    pub p_b: Vec<f64>,
    /// Unified index of every class of the second distribution.
    pub b_to_unified: Vec<usize>,
}

/// Align `spd_b`'s classes onto `spd_a`'s. Each class of `spd_b` merges
/// into the first class of `spd_a` whose representative it is equivalent to,
/// otherwise it is appended. Missing classes get probability zero.
pub async fn align_class_sets(
    spd_a: &SemanticDistribution,
    spd_b: &SemanticDistribution,
    nli: &dyn EntailmentModel,
    context: &str,
) -> Result<Alignment, VcseError> {
    let mut representatives: Vec<String> = spd_a.classes.iter().map(|c| c.representative.clone()).collect();
    let mut p_a = spd_a.probs.clone();
    let mut p_b = vec![0.0; representatives.len()];
    let mut b_to_unified = Vec::with_capacity(spd_b.len());
    for (class, &prob) in spd_b.classes.iter().zip(&spd_b.probs) {
        let mut target = None;
        for (k, a_class) in spd_a.classes.iter().enumerate() {
            if equivalent(nli, &a_class.representative, &class.representative, context).await? {
                target = Some(k);
                break;
            }
        }
        let k = match target {
            Some(k) => k,
            None => {
                representatives.push(class.representative.clone());
                p_a.push(0.0);
                p_b.push(0.0);
                representatives.len() - 1
            }
        };
        p_b[k] += prob;
        b_to_unified.push(k);
    }
    Ok(Alignment {
        representatives,
        p_a,
        p_b,
        b_to_unified,
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), VcseError> {
    if p.is_empty() {
        return Err(VcseError::NotADistribution(format!("{what} is empty")));
    }
    if p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(VcseError::NotADistribution(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(VcseError::NotADistribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

fn contrast_logits(p: &[f64], p_prime: &[f64], lambda: f64) -> Result<Vec<f64>, VcseError> {
    if p.len() != p_prime.len() {
        return Err(VcseError::LengthMismatch(p.len(), p_prime.len()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(VcseError::InvalidLambda(lambda));
    }
    let logits: Vec<f64> = p
        .iter()
        .zip(p_prime)
        .map(|(&a, &b)| (1.0 + lambda) * a - lambda * b)
        .collect();
    Ok(softmax(&logits))
}

/// `softmax((1 + λ)·p − λ·p′)`.
pub fn contrast_distributions(p: &[f64], p_prime: &[f64], lambda: f64) -> Result<Vec<f64>, VcseError> {
    if p.len() != p_prime.len() {
        return Err(VcseError::LengthMismatch(p.len(), p_prime.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(p_prime, "p'")?;
    contrast_logits(p, p_prime, lambda)
}

/// Entropy in nats, with `0 · ln 0 = 0`.
pub fn shannon_entropy(dist: &[f64]) -> Result<f64, VcseError> {
    check_distribution(dist, "distribution")?;
    let h: f64 = dist.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConditionedDistribution {
    pub unified_classes: Vec<String>,
    pub p_orig: Vec<f64>,
    pub p_dist: Vec<f64>,
    pub p_contrasted: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VseScore {
    /// Nats.
    pub value: f64,
    pub n_classes: usize,
    pub flagged_degenerate: bool,
}

/// Contrast an alignment. `raw_masses` skips the sum-to-one check, for runs
/// that keep unnormalized class masses.
pub fn vsd_from_alignment(
    alignment: &Alignment,
    lambda: f64,
    raw_masses: bool,
) -> Result<VisionConditionedDistribution, VcseError> {
    let p_contrasted = if raw_masses {
        contrast_logits(&alignment.p_a, &alignment.p_b, lambda)?
    } else {
        contrast_distributions(&alignment.p_a, &alignment.p_b, lambda)?
    };
    Ok(VisionConditionedDistribution {
        unified_classes: alignment.representatives.clone(),
        p_orig: alignment.p_a.clone(),
        p_dist: alignment.p_b.clone(),
        p_contrasted,
        lambda,
    })
}

/// Recompute the score from stored intermediates.
pub fn score_vsd(vsd: &VisionConditionedDistribution, flagged_degenerate: bool) -> Result<VseScore, VcseError> {
    Ok(VseScore {
        value: shannon_entropy(&vsd.p_contrasted)?,
        n_classes: vsd.p_contrasted.len(),
        flagged_degenerate,
    })
}

/// Seeds used by one VSE computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSeeds {
    pub original: u64,
    pub distortion: u64,
    pub distorted: u64,
}

impl BranchSeeds {
    pub fn derive(seed: u64) -> Self {
        Self {
            original: seed::derive(seed, "original", 0),
            distortion: seed::derive(seed, "distortion", 0),
            distorted: seed::derive(seed, "distorted", 0),
        }
    }
}

/// Everything computed for one (image, question) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VseOutcome {
    pub score: VseScore,
    pub vsd: VisionConditionedDistribution,
    pub original: SpdEstimate,
    pub distorted: SpdEstimate,
    pub seeds: BranchSeeds,
    pub placement: Placement,
}

/// The exact PNGs each branch sends to the VLM, with their transform seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPlan {
    pub original: Vec<(u64, Vec<u8>)>,
    pub distorted: Vec<(u64, Vec<u8>)>,
}

pub fn distorted_image(image: &ImageTensor, cfg: &VcseConfig, seed: u64) -> Result<ImageTensor, VcseError> {
    Ok(apply_distortion(image, &cfg.distortion, BranchSeeds::derive(seed).distortion)?)
}

pub fn branch_plan(image: &ImageTensor, cfg: &VcseConfig, seed: u64) -> Result<BranchPlan, VcseError> {
    cfg.validate()?;
    let seeds = BranchSeeds::derive(seed);
    let distorted = distorted_image(image, cfg, seed)?;
    let weak = |on: bool| if on { Some(&cfg.weak) } else { None };
    Ok(BranchPlan {
        original: sample_inputs(image, weak(cfg.placement.original()), cfg.spd.samples, seeds.original)?,
        distorted: sample_inputs(&distorted, weak(cfg.placement.distorted()), cfg.spd.samples, seeds.distorted)?,
    })
}

/// Full pipeline for one (image, question) pair.
pub async fn compute_vse(
    image: &ImageTensor,
    question: &str,
    cfg: &VcseConfig,
    seed: u64,
    vlm: &dyn VisionLanguageModel,
    nli: &dyn EntailmentModel,
) -> Result<VseOutcome, VcseError> {
    cfg.validate()?;
    let seeds = BranchSeeds::derive(seed);
    let distorted_img = distorted_image(image, cfg, seed)?;
    let weak = |on: bool| if on { Some(&cfg.weak) } else { None };
    let (original, distorted) = tokio::try_join!(
        estimate_spd(image, question, &cfg.spd, weak(cfg.placement.original()), seeds.original, vlm, nli),
        estimate_spd(
            &distorted_img,
            question,
            &cfg.spd,
            weak(cfg.placement.distorted()),
            seeds.distorted,
            vlm,
            nli
        ),
    )?;
    let alignment = align_class_sets(&original.distribution, &distorted.distribution, nli, question).await?;
    let vsd = vsd_from_alignment(&alignment, cfg.lambda, cfg.spd.raw_masses)?;
    let score = score_vsd(&vsd, original.degenerate || distorted.degenerate)?;
    Ok(VseOutcome {
        score,
        vsd,
        original,
        distorted,
        seeds,
        placement: cfg.placement,
    })
}

/// Script the answer every sample of both branches returns for one
/// (image, question, seed). Answers are `(text, token logprobs)`; each branch
/// needs exactly `cfg.spd.samples` of them. Fails if two samples that should
/// answer differently would send the VLM identical PNGs.
pub fn script_branches(
    script: &mut Script,
    image: &ImageTensor,
    question: &str,
    cfg: &VcseConfig,
    seed: u64,
    original: &[(String, Vec<f64>)],
    distorted: &[(String, Vec<f64>)],
) -> Result<(), VcseError> {
    let plan = branch_plan(image, cfg, seed)?;
    let mut seen: HashMap<String, &str> = HashMap::new();
    for (inputs, answers) in [(&plan.original, original), (&plan.distorted, distorted)] {
        if answers.len() != inputs.len() {
            return Err(VcseError::InvalidInput(format!(
                "{} scripted answers for {} samples",
                answers.len(),
                inputs.len()
            )));
        }
        for ((_, png), (text, logprobs)) in inputs.iter().zip(answers) {
            let digest = image_digest(Some(png));
            match seen.get(&digest) {
                Some(prev) if *prev == text.as_str() => continue,
                Some(prev) => {
                    return Err(VcseError::InvalidInput(format!(
                        "samples answering {prev:?} and {text:?} share image {digest}"
                    )))
                }
                None => {}
            }
            seen.insert(digest.clone(), text);
            script.add_generation_at(&digest, question, cfg.spd.temperature, text, logprobs.clone());
        }
    }
    Ok(())
}

/// Flag a response as hallucinated when its VSE exceeds the threshold.
pub fn is_hallucination(vse: f64, tau: f64) -> bool {
    vse > tau
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub youden_j: f64,
    /// All scores were equal, so no threshold separates anything.
    pub degenerate: bool,
}

/// Choose τ maximizing Youden's J over midpoints of consecutive distinct
/// scores; `labels[i]` is true for hallucinated samples, which are flagged
/// when `score > τ`. Ties go to the smaller τ.
pub fn calibrate_threshold(scores: &[f64], labels: &[bool]) -> Result<Calibration, VcseError> {
    if scores.len() != labels.len() {
        return Err(VcseError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(VcseError::InvalidInput("scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(VcseError::SingleClassLabels);
    }
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() == 1 {
        log::warn!("all calibration scores equal {}; threshold is degenerate", distinct[0]);
        return Ok(Calibration {
            tau: distinct[0],
            youden_j: 0.0,
            degenerate: true,
        });
    }

    // J = TP/P + TN/N - 1; compare TP·N + TN·P exactly in integers.
    let mut best: Option<(u64, f64)> = None;
    for pair in distinct.windows(2) {
        let tau = (pair[0] + pair[1]) / 2.0;
        let (mut tp, mut tn) = (0u64, 0u64);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > tau, l) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                _ => {}
            }
        }
        let key = tp * negatives + tn * positives;
        if best.is_none_or(|(k, _)| key > k) {
            best = Some((key, tau));
        }
    }
    let (key, tau) = best.expect("at least one midpoint");
    let youden_j = key as f64 / (positives * negatives) as f64 - 1.0;
    Ok(Calibration {
        tau,
        youden_j,
        degenerate: false,
    })
}
