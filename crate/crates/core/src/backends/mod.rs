//! Model backends: VLM generation, NLI entailment and LLM structured tasks.
//!
//! Each capability is a trait so the pipelines run unchanged against an
//! OpenAI-compatible HTTP endpoint ([`http`]) or a scripted in-process mock
//! ([`mock`]). [`server`] exposes a mock script over HTTP for integration
//! tests of the wire path.

pub mod http;
pub mod mock;
pub mod server;
pub mod structured;
pub mod templates;
pub mod throttle;

use std::collections::BTreeMap;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use structured::llm_structured;
pub use templates::TemplateRegistry;
pub use throttle::Throttled;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("authentication failed (HTTP {0})")]
    AuthFailure(u16),
    #[error("no scripted response for {0}")]
    ScriptMiss(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// One VLM sampling call.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// PNG bytes, or `None` for a text-only prompt.
    pub image: Option<Vec<u8>>,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    /// Forwarded as the `seed` field on the wire.
    pub seed: Option<u64>,
}

pub const DEFAULT_TOP_LOGPROBS: u32 = 20;
pub const DEFAULT_MAX_TOKENS: u32 = 256;

impl GenerationRequest {
    pub fn new(image: Option<Vec<u8>>, prompt: impl Into<String>, temperature: f64) -> Self {
        Self {
            image,
            prompt: prompt.into(),
            temperature,
            max_tokens: DEFAULT_MAX_TOKENS,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.top_logprobs == 0 {
            return Err(BackendError::InvalidRequest("top_logprobs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn image_digest(&self) -> String {
        crate::perturb::image_digest(self.image.as_deref())
    }
}

/// Log-probability of one generated token and of its top-k alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub logprob: f64,
    /// Sorted descending.
    pub top: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Vec<TokenLogprob>,
}

impl GenerationResult {
    /// Builds a result, sorting each top-k list and rejecting positive
    /// log-probabilities.
    pub fn new(text: impl Into<String>, tokens: Vec<TokenLogprob>) -> Result<Self, BackendError> {
        let mut tokens = tokens;
        for t in &mut tokens {
            if !(t.logprob <= 0.0) || t.top.iter().any(|lp| !(*lp <= 0.0)) {
                return Err(BackendError::MalformedResponse(format!(
                    "log-probabilities must be <= 0, got {}",
                    t.logprob
                )));
            }
            t.top.sort_by(|a, b| b.total_cmp(a));
        }
        Ok(Self { text: text.into(), tokens })
    }

    pub fn logprobs(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.logprob).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentVerdict {
    /// Premise entails hypothesis.
    pub forward: bool,
    /// Hypothesis entails premise.
    pub backward: bool,
}

/// A request to an LLM for one templated structured task.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub template_id: String,
    pub inputs: BTreeMap<String, String>,
    pub prompt: String,
    /// 0 for the first call, 1 for the repair retry.
    pub attempt: u32,
}

#[async_trait]
pub trait VisionLanguageModel: Send + Sync {
    fn backend_id(&self) -> String;
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError>;
    async fn probe(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

#[async_trait]
pub trait EntailmentModel: Send + Sync {
    fn backend_id(&self) -> String;
    async fn entailment(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict, BackendError>;
    async fn probe(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

#[async_trait]
pub trait LanguageModel: Send + Sync {
    fn backend_id(&self) -> String;
    /// Raw completion text for an already rendered prompt.
    async fn complete(&self, req: &LlmRequest) -> Result<String, BackendError>;
    async fn probe(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Text handed to the NLI judge for one candidate answer. Short answers such
/// as "left" are meaningless without the question, so the question is
/// prepended when there is one.
pub fn entailment_text(context: &str, candidate: &str) -> String {
    let context = context.trim();
    if context.is_empty() {
        candidate.trim().to_string()
    } else {
        format!("Question: {context} Answer: {}", candidate.trim())
    }
}

/// Two answers are equivalent iff each entails the other. The pair is put in
/// a canonical order before the backend is consulted, so the result does not
/// depend on argument order.
pub async fn semantically_equivalent(
    nli: &dyn EntailmentModel,
    a: &str,
    b: &str,
    context: &str,
) -> Result<bool, BackendError> {
    if a.trim().is_empty() || b.trim().is_empty() {
        return Err(BackendError::InvalidRequest("entailment candidates must be nonempty".into()));
    }
    let (first, second) = if a <= b { (a, b) } else { (b, a) };
    let verdict = nli
        .entailment(&entailment_text(context, first), &entailment_text(context, second))
        .await?;
    Ok(verdict.forward && verdict.backward)
}
