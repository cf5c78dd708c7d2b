//! Atomic-fact alignment (ALFA) labels.
//!
//! The reference answer is split into atomic facts and the response into
//! atomic claims. Every claim is judged matched, hallucinated or extraneous,
//! and the label is the fraction of claims in each category.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::structured::llm_structured;
use crate::backends::templates::{
    inputs, TemplateRegistry, DECOMPOSE_CLAIMS, DECOMPOSE_REFERENCE, MATCH_CLAIMS,
};
use crate::backends::{BackendError, GenerationRequest, GenerationResult, LanguageModel, VisionLanguageModel};
use crate::longform::{decompose_report, AtomicClaim, LongformError, RESPONSE_TEMPERATURE};

#[derive(Debug, Error)]
pub enum AlfaError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("response has no assertive content")]
    EmptyResponse,
    #[error("no claims to judge")]
    EmptyJudgments,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("label file: {0}")]
    Io(String),
}

impl From<LongformError> for AlfaError {
    fn from(e: LongformError) -> Self {
        match e {
            LongformError::EmptyReport => AlfaError::EmptyResponse,
            LongformError::Backend(b) => AlfaError::Backend(b),
            LongformError::Vcse(v) => AlfaError::Backend(BackendError::InvalidRequest(v.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactKind {
    Instruction,
    Contextual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub text: String,
    pub kind: FactKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Matched,
    Hallucinated,
    Extraneous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimJudgment {
    pub claim: String,
    pub verdict: Verdict,
    /// Set exactly when the verdict is `Matched`. A match against a
    /// contextual fact counts as matched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_fact_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlfaLabel {
    pub n2: u64,
    pub m: u64,
    pub h: u64,
    pub e: u64,
    pub alpha_m: f64,
    pub alpha_h: f64,
    pub alpha_e: f64,
}

impl AlfaLabel {
    pub fn from_counts(m: u64, h: u64, e: u64) -> Result<Self, AlfaError> {
        let n2 = m + h + e;
        if n2 == 0 {
            return Err(AlfaError::EmptyJudgments);
        }
        let f = |k: u64| ratio_to_f64(Ratio::new(k, n2));
        Ok(Self {
            n2,
            m,
            h,
            e,
            alpha_m: f(m),
            alpha_h: f(h),
            alpha_e: f(e),
        })
    }

    /// Exact `(α_m, α_h, α_e)`.
    pub fn ratios(&self) -> (Ratio<u64>, Ratio<u64>, Ratio<u64>) {
        (
            Ratio::new(self.m, self.n2),
            Ratio::new(self.h, self.n2),
            Ratio::new(self.e, self.n2),
        )
    }
}

fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Count verdicts into a label.
pub fn compute_alfa(judgments: &[ClaimJudgment]) -> Result<AlfaLabel, AlfaError> {
    let count = |v: Verdict| judgments.iter().filter(|j| j.verdict == v).count() as u64;
    AlfaLabel::from_counts(count(Verdict::Matched), count(Verdict::Hallucinated), count(Verdict::Extraneous))
}

#[derive(Deserialize)]
struct FactsReply {
    facts: Vec<AtomicFact>,
}

pub async fn decompose_reference(
    reference: &str,
    instruction: &str,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<Vec<AtomicFact>, AlfaError> {
    if reference.trim().is_empty() {
        return Err(AlfaError::EmptyReference);
    }
    let reply: FactsReply = llm_structured(
        llm,
        templates,
        DECOMPOSE_REFERENCE,
        inputs([("instruction", instruction), ("reference", reference)]),
        |r: &FactsReply| {
            if r.facts.is_empty() {
                return Err("no facts".into());
            }
            match r.facts.iter().position(|f| f.text.trim().is_empty()) {
                Some(i) => Err(format!("fact {i} is empty")),
                None => Ok(()),
            }
        },
    )
    .await?;
    Ok(reply.facts)
}

/// `0. [instruction] text` lines, as the matching template expects.
pub fn format_facts(facts: &[AtomicFact]) -> String {
    let mut out = String::new();
    for (i, f) in facts.iter().enumerate() {
        let kind = match f.kind {
            FactKind::Instruction => "instruction",
            FactKind::Contextual => "contextual",
        };
        let _ = writeln!(out, "{i}. [{kind}] {}", f.text);
    }
    out.trim_end().to_string()
}

pub fn format_claims(claims: &[String]) -> String {
    claims
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{i}. {c}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Deserialize)]
struct RawJudgment {
    claim_index: usize,
    verdict: Verdict,
    #[serde(default)]
    fact_index: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct JudgmentsReply {
    judgments: Vec<RawJudgment>,
}

fn validate_judgments(reply: &JudgmentsReply, n_claims: usize, n_facts: usize) -> Result<(), String> {
    let mut seen = vec![false; n_claims];
    for j in &reply.judgments {
        match seen.get_mut(j.claim_index) {
            None => return Err(format!("claim_index {} out of range", j.claim_index)),
            Some(true) => return Err(format!("claim {} judged twice", j.claim_index)),
            Some(s) => *s = true,
        }
        match (j.verdict, j.fact_index) {
            (Verdict::Matched, None) => return Err(format!("matched claim {} lacks fact_index", j.claim_index)),
            (Verdict::Matched, Some(k)) if k >= n_facts => return Err(format!("fact_index {k} out of range")),
            (Verdict::Hallucinated | Verdict::Extraneous, Some(_)) => {
                return Err(format!("unmatched claim {} has a fact_index", j.claim_index))
            }
            _ => {}
        }
    }
    match seen.iter().position(|s| !s) {
        Some(i) => Err(format!("claim {i} not judged")),
        None => Ok(()),
    }
}

/// Judge every claim against the reference facts; output follows claim order.
pub async fn match_claims(
    claims: &[String],
    facts: &[AtomicFact],
    instruction: &str,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<Vec<ClaimJudgment>, AlfaError> {
    if claims.is_empty() {
        return Err(AlfaError::EmptyJudgments);
    }
    let facts_text = format_facts(facts);
    let claims_text = format_claims(claims);
    let reply: JudgmentsReply = llm_structured(
        llm,
        templates,
        MATCH_CLAIMS,
        inputs([("instruction", instruction), ("facts", &facts_text), ("claims", &claims_text)]),
        |r: &JudgmentsReply| validate_judgments(r, claims.len(), facts.len()),
    )
    .await?;
    let mut raw = reply.judgments;
    raw.sort_by_key(|j| j.claim_index);
    Ok(raw
        .into_iter()
        .map(|j| ClaimJudgment {
            claim: claims[j.claim_index].clone(),
            verdict: j.verdict,
            matched_fact_index: j.fact_index,
        })
        .collect())
}

/// All intermediates of labeling one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlfaOutcome {
    pub claims: Vec<AtomicClaim>,
    pub facts: Vec<AtomicFact>,
    pub judgments: Vec<ClaimJudgment>,
    pub label: AlfaLabel,
}

/// Label a response whose claims are already known.
pub async fn label_claims(
    claims: Vec<AtomicClaim>,
    reference: &str,
    instruction: &str,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<AlfaOutcome, AlfaError> {
    let facts = decompose_reference(reference, instruction, llm, templates).await?;
    finish(claims, facts, instruction, llm, templates).await
}

async fn finish(
    claims: Vec<AtomicClaim>,
    facts: Vec<AtomicFact>,
    instruction: &str,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<AlfaOutcome, AlfaError> {
    let texts: Vec<String> = claims.iter().map(|c| c.text.clone()).collect();
    let judgments = match_claims(&texts, &facts, instruction, llm, templates).await?;
    let label = compute_alfa(&judgments)?;
    Ok(AlfaOutcome {
        claims,
        facts,
        judgments,
        label,
    })
}

/// Label a response text. Both decompositions run concurrently.
pub async fn label_response(
    response: &str,
    reference: &str,
    instruction: &str,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<AlfaOutcome, AlfaError> {
    if response.trim().is_empty() {
        return Err(AlfaError::EmptyResponse);
    }
    let (claims, facts) = tokio::try_join!(
        async { decompose_report(response, llm, templates).await.map_err(AlfaError::from) },
        decompose_reference(reference, instruction, llm, templates),
    )?;
    finish(claims, facts, instruction, llm, templates).await
}

/// Generate the low-temperature response for an image and label it.
pub async fn label_sample(
    png: &[u8],
    instruction: &str,
    reference: &str,
    vlm: &dyn VisionLanguageModel,
    llm: &dyn LanguageModel,
    templates: &TemplateRegistry,
) -> Result<(GenerationResult, AlfaOutcome), AlfaError> {
    let req = GenerationRequest::new(Some(png.to_vec()), instruction, RESPONSE_TEMPERATURE);
    let response = vlm.generate(&req).await?;
    let outcome = label_response(&response.text, reference, instruction, llm, templates).await?;
    Ok((response, outcome))
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: String,
    pub response: String,
    pub claims: Vec<String>,
    pub facts: Vec<AtomicFact>,
    pub judgments: Vec<ClaimJudgment>,
    pub m: u64,
    pub h: u64,
    pub e: u64,
    pub alpha_m: f64,
    pub alpha_h: f64,
    pub alpha_e: f64,
    /// Template id to content hash.
    pub template_ids: BTreeMap<String, String>,
    pub backend_ids: BTreeMap<String, String>,
}

impl LabelEntry {
    pub fn new(
        id: &str,
        response: &str,
        outcome: &AlfaOutcome,
        templates: &TemplateRegistry,
        backend_ids: BTreeMap<String, String>,
    ) -> Self {
        let template_ids = [DECOMPOSE_CLAIMS, DECOMPOSE_REFERENCE, MATCH_CLAIMS]
            .into_iter()
            .map(|t| (t.to_string(), templates.hash(t).unwrap_or_default().to_string()))
            .collect();
        let l = &outcome.label;
        Self {
            id: id.to_string(),
            response: response.to_string(),
            claims: outcome.claims.iter().map(|c| c.text.clone()).collect(),
            facts: outcome.facts.clone(),
            judgments: outcome.judgments.clone(),
            m: l.m,
            h: l.h,
            e: l.e,
            alpha_m: l.alpha_m,
            alpha_h: l.alpha_h,
            alpha_e: l.alpha_e,
            template_ids,
            backend_ids,
        }
    }
}

pub fn write_label_file(path: &Path, entries: &[LabelEntry]) -> Result<(), AlfaError> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).map_err(|e| AlfaError::Io(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| AlfaError::Io(format!("{}: {e}", path.display())))
}

pub fn read_label_file(path: &Path) -> Result<Vec<LabelEntry>, AlfaError> {
    let text = std::fs::read_to_string(path).map_err(|e| AlfaError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| AlfaError::Io(format!("line {}: {e}", i + 1))))
        .collect()
}
