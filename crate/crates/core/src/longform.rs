//! Report-level detection. A generated report is split into atomic claims,
//! each claim gets a verification question whose expected answer is the
//! claim, and every question is scored as an ordinary VQA item.

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::structured::llm_structured;
use crate::backends::templates::{inputs, TemplateRegistry, DECOMPOSE_CLAIMS, VERIFICATION_QUESTION};
use crate::backends::{BackendError, EntailmentModel, GenerationRequest, GenerationResult, LanguageModel, VisionLanguageModel};
use crate::perturb::ImageTensor;
use crate::seed;
use crate::vcse::{compute_vse, VcseConfig, VcseError, VseOutcome};

/// Temperature of the audited, deployment-like response.
pub const RESPONSE_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum LongformError {
    #[error("report contains no assertions")]
    EmptyReport,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Vcse(#[from] VcseError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicClaim {
    pub index: usize,
    pub text: String,
    /// Byte range of the claim in the report, when it occurs verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_span: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimVerificationItem {
    pub claim: AtomicClaim,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Box<VseOutcome>>,
    /// Why this claim could not be scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ClaimVerificationItem {
    pub fn vse(&self) -> Option<f64> {
        self.outcome.as_ref().map(|o| o.score.value)
    }
}

#[derive(Deserialize)]
struct ClaimsReply {
    claims: Vec<String>,
}

#[derive(Deserialize)]
struct QuestionReply {
    question: String,
}

fn locate(report: &str, claim: &str) -> Option<(usize, usize)> {
    report.find(claim).map(|start| (start, start + claim.len()))
}

/// Split `report` into atomic claims, in report order.
pub async fn decompose_report(
    report: &str,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<Vec<AtomicClaim>, LongformError> {
    if report.trim().is_empty() {
        return Err(LongformError::EmptyReport);
    }
    let reply: ClaimsReply = llm_structured(llm, templates, DECOMPOSE_CLAIMS, inputs([("text", report)]), |r: &ClaimsReply| {
        match r.claims.iter().position(|c| c.trim().is_empty()) {
            Some(i) => Err(format!("claim {i} is empty")),
            None => Ok(()),
        }
    })
    .await?;
    if reply.claims.is_empty() {
        return Err(LongformError::EmptyReport);
    }
    Ok(reply
        .claims
        .into_iter()
        .enumerate()
        .map(|(index, text)| {
            let text = text.trim().to_string();
            AtomicClaim {
                index,
                source_span: locate(report, &text),
                text,
            }
        })
        .collect())
}

/// A question about the image whose correct answer is the claim.
pub async fn generate_verification_question(
    claim: &AtomicClaim,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<String, LongformError> {
    let reply: QuestionReply = llm_structured(
        llm,
        templates,
        VERIFICATION_QUESTION,
        inputs([("claim", claim.text.as_str())]),
        |r: &QuestionReply| {
            if r.question.trim().is_empty() {
                Err("empty question".into())
            } else {
                Ok(())
            }
        },
    )
    .await?;
    Ok(reply.question.trim().to_string())
}

/// Seed for one claim. It depends on the claim text rather than its
/// position, so reordering claims does not change any score.
pub fn claim_seed(report_seed: u64, claim: &AtomicClaim) -> u64 {
    seed::derive(report_seed, &format!("claim:{}", claim.text), 0)
}

async fn score_claim(
    image: &ImageTensor,
    claim: AtomicClaim,
    cfg: &VcseConfig,
    report_seed: u64,
    vlm: &dyn VisionLanguageModel,
    nli: &dyn EntailmentModel,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> ClaimVerificationItem {
    let question = match generate_verification_question(&claim, llm, templates).await {
        Ok(q) => q,
        Err(e) => {
            return ClaimVerificationItem {
                claim,
                question: None,
                outcome: None,
                error: Some(e.to_string()),
            }
        }
    };
    let seed = claim_seed(report_seed, &claim);
    let (outcome, error) = match compute_vse(image, &question, cfg, seed, vlm, nli).await {
        Ok(o) => (Some(Box::new(o)), None),
        Err(e) => (None, Some(e.to_string())),
    };
    ClaimVerificationItem {
        claim,
        question: Some(question),
        outcome,
        error,
    }
}

/// Score already decomposed claims concurrently. A claim that fails keeps
/// its place in the output with an error marker.
#[allow(clippy::too_many_arguments)]
pub async fn score_claims(
    image: &ImageTensor,
    claims: &[AtomicClaim],
    cfg: &VcseConfig,
    report_seed: u64,
    vlm: &dyn VisionLanguageModel,
    nli: &dyn EntailmentModel,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Vec<ClaimVerificationItem> {
    join_all(
        claims
            .iter()
            .cloned()
            .map(|c| score_claim(image, c, cfg, report_seed, vlm, nli, llm, templates)),
    )
    .await
}

/// The audited report with its per-claim scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportScore {
    pub report: GenerationResult,
    pub items: Vec<ClaimVerificationItem>,
}

impl ReportScore {
    /// Mean VSE over the claims that were scored.
    pub fn mean_vse(&self) -> Option<f64> {
        mean(self.items.iter().filter_map(ClaimVerificationItem::vse))
    }
}

pub fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Generate a report for `instruction`, decompose it and score every claim.
#[allow(clippy::too_many_arguments)]
pub async fn score_report(
    image: &ImageTensor,
    instruction: &str,
    cfg: &VcseConfig,
    seed: u64,
    vlm: &dyn VisionLanguageModel,
    nli: &dyn EntailmentModel,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<ReportScore, LongformError> {
    let mut req = GenerationRequest::new(Some(image.to_png()), instruction, RESPONSE_TEMPERATURE);
    req.top_logprobs = cfg.spd.top_logprobs;
    req.max_tokens = cfg.spd.max_tokens;
    let report = vlm.generate(&req).await?;
    let claims = decompose_report(&report.text, llm, templates).await?;
    let items = score_claims(image, &claims, cfg, seed, vlm, nli, llm, templates).await;
    Ok(ReportScore { report, items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{MockBackend, Script};
    use crate::perturb::image_digest;
    use crate::vcse::script_branches;
    use approx::assert_abs_diff_eq;
    use serde_json::json;

    const REPORT: &str = "Cardiomegaly is present. No effusion.";
    const Q1: &str = "Is the heart enlarged, and what is the cardiac finding?";
    const Q2: &str = "Is there a pleural effusion?";

    fn claims_script(script: &mut Script, report: &str, claims: &[&str]) {
        script.add_completion(DECOMPOSE_CLAIMS, inputs([("text", report)]), json!({ "claims": claims }));
    }

    fn answers(text: &str, lp: f64, n: usize) -> Vec<(String, Vec<f64>)> {
        vec![(text.to_string(), vec![lp]); n]
    }

    #[tokio::test]
    async fn decomposition() {
        let templates = TemplateRegistry::builtin();
        let mut script = Script::default();
        claims_script(&mut script, REPORT, &["cardiomegaly is present", "there is no effusion"]);
        claims_script(&mut script, "Small nodule.", &["Small nodule."]);
        let llm = MockBackend::new(script);
        let claims = decompose_report(REPORT, &llm, &templates).await.unwrap();
        let texts: Vec<_> = claims.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["cardiomegaly is present", "there is no effusion"]);
        assert_eq!(claims.iter().map(|c| c.index).collect::<Vec<_>>(), [0, 1]);
        let single = decompose_report("Small nodule.", &llm, &templates).await.unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].source_span, Some((0, 13)));
        assert!(matches!(decompose_report("  \n", &llm, &templates).await, Err(LongformError::EmptyReport)));
    }

    #[tokio::test]
    async fn verification_questions() {
        let templates = TemplateRegistry::builtin();
        let mut script = Script::default();
        script.add_completion(VERIFICATION_QUESTION, inputs([("claim", "cardiomegaly is present")]), json!({ "question": Q1 }));
        let llm = MockBackend::new(script);
        let claim = |t: &str| AtomicClaim { index: 0, text: t.into(), source_span: None };
        let q = generate_verification_question(&claim("cardiomegaly is present"), &llm, &templates).await.unwrap();
        assert_eq!(q, Q1);
        let miss = generate_verification_question(&claim("unscripted"), &llm, &templates).await;
        assert!(matches!(miss, Err(LongformError::Backend(BackendError::ScriptMiss(_)))));
    }

    fn report_fixture(image: &ImageTensor, cfg: &VcseConfig, seed: u64, claims: &[&str]) -> Script {
        let mut script = Script::default();
        let digest = image_digest(Some(&image.to_png()));
        script.add_generation_at(&digest, "Describe the image.", RESPONSE_TEMPERATURE, REPORT, vec![-0.2, -0.3]);
        claims_script(&mut script, REPORT, claims);
        let all = [("cardiomegaly is present", Q1, "enlarged"), ("there is no effusion", Q2, "no")];
        for (claim, q, answer) in all {
            script.add_completion(VERIFICATION_QUESTION, inputs([("claim", claim)]), json!({ "question": q }));
            script.add_entailment_group(q, vec![vec![answer.into()], vec!["other".into()]]);
            let c = AtomicClaim { index: 0, text: claim.into(), source_span: None };
            let s = claim_seed(seed, &c);
            let mut orig = answers(answer, -0.01, 9);
            orig.push(("other".into(), vec![-1000.0]));
            // The first claim's answer survives distortion, the second flips.
            let dist = if claim == all[0].0 { orig.clone() } else { answers("other", -0.01, 10) };
            script_branches(&mut script, image, q, cfg, s, &orig, &dist).unwrap();
        }
        script
    }

    #[tokio::test]
    async fn report_scoring_end_to_end() {
        let templates = TemplateRegistry::builtin();
        let image = ImageTensor::noise_pattern(32, 32, 1, 5).unwrap();
        let cfg = VcseConfig::default();
        let claims = ["cardiomegaly is present", "there is no effusion"];
        let mock = MockBackend::new(report_fixture(&image, &cfg, 9, &claims));
        let out = score_report(&image, "Describe the image.", &cfg, 9, &mock, &mock, &mock, &templates)
            .await
            .unwrap();
        assert_eq!(out.items.len(), 2);
        let (e1, e2, em1) = (1f64.exp(), 2f64.exp(), (-1f64).exp());
        let h2 = |a: f64, b: f64| -(a * a.ln() + b * b.ln());
        let prior = h2(e1 / (e1 + 1.0), 1.0 / (e1 + 1.0));
        let flipped = h2(e2 / (e2 + em1), em1 / (e2 + em1));
        assert_abs_diff_eq!(out.items[0].vse().unwrap(), prior, epsilon = 1e-9);
        assert_abs_diff_eq!(out.items[1].vse().unwrap(), flipped, epsilon = 1e-9);
        assert!(out.items[0].vse() > out.items[1].vse());
        assert_abs_diff_eq!(out.mean_vse().unwrap(), (prior + flipped) / 2.0, epsilon = 1e-9);

        // Reordering the claims permutes the scores.
        let swapped = [claims[1], claims[0]];
        let mock = MockBackend::new(report_fixture(&image, &cfg, 9, &swapped));
        let out2 = score_report(&image, "Describe the image.", &cfg, 9, &mock, &mock, &mock, &templates)
            .await
            .unwrap();
        assert_eq!(out2.items[0].vse(), out.items[1].vse());
        assert_eq!(out2.items[1].vse(), out.items[0].vse());
    }

    #[tokio::test]
    async fn claim_failures_are_marked() {
        let templates = TemplateRegistry::builtin();
        let image = ImageTensor::noise_pattern(32, 32, 1, 5).unwrap();
        let cfg = VcseConfig::default();
        let mut script = report_fixture(&image, &cfg, 9, &["cardiomegaly is present", "unscripted claim"]);
        script.add_completion(VERIFICATION_QUESTION, inputs([("claim", "unscripted claim")]), json!({ "question": "Unscripted?" }));
        let mock = MockBackend::new(script);
        let out = score_report(&image, "Describe the image.", &cfg, 9, &mock, &mock, &mock, &templates)
            .await
            .unwrap();
        assert!(out.items[0].error.is_none());
        assert_eq!(out.items[1].question.as_deref(), Some("Unscripted?"));
        assert!(out.items[1].error.as_deref().unwrap().contains("generation"));
        assert_eq!(out.mean_vse(), out.items[0].vse());
    }

    #[tokio::test]
    async fn empty_report_is_an_error() {
        let templates = TemplateRegistry::builtin();
        let image = ImageTensor::noise_pattern(8, 8, 1, 5).unwrap();
        let mut script = Script::default();
        script.add_generation(&image_digest(Some(&image.to_png())), "Describe.", " ", vec![-0.1]);
        let mock = MockBackend::new(script);
        let res = score_report(&image, "Describe.", &VcseConfig::default(), 1, &mock, &mock, &mock, &templates).await;
        assert!(matches!(res, Err(LongformError::EmptyReport)));
    }
}
