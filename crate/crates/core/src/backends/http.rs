//! Client for OpenAI-compatible chat-completions endpoints.
//!
//! The VLM route requests `logprobs` with `top_logprobs`; NLI is phrased as a
//! one-word classification prompt, asked once per direction; LLM tasks send
//! the rendered template. Transport errors, HTTP 429 and 5xx are retried with
//! exponential backoff.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::templates::{TemplateRegistry, NLI_ENTAILMENT};
use super::{
    BackendError, EntailmentModel, EntailmentVerdict, GenerationRequest, GenerationResult, LanguageModel,
    LlmRequest, Throttled, TokenLogprob, VisionLanguageModel,
};

/// Chat-completions wire format, shared with the mock server.
pub mod wire {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChatRequest {
        pub model: String,
        pub messages: Vec<Message>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub temperature: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub max_tokens: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub logprobs: Option<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub top_logprobs: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub seed: Option<u64>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Message {
        pub role: String,
        pub content: Content,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(untagged)]
    pub enum Content {
        Text(String),
        Parts(Vec<ContentPart>),
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(tag = "type", rename_all = "snake_case")]
    pub enum ContentPart {
        Text { text: String },
        ImageUrl { image_url: ImageUrl },
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ImageUrl {
        pub url: String,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChatResponse {
        #[serde(default)]
        pub id: String,
        #[serde(default)]
        pub model: String,
        pub choices: Vec<Choice>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct Choice {
        #[serde(default)]
        pub index: u32,
        pub message: ResponseMessage,
        #[serde(default)]
        pub logprobs: Option<ChoiceLogprobs>,
        #[serde(default)]
        pub finish_reason: Option<String>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ResponseMessage {
        #[serde(default)]
        pub role: String,
        #[serde(default)]
        pub content: Option<String>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct ChoiceLogprobs {
        #[serde(default)]
        pub content: Option<Vec<TokenInfo>>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct TokenInfo {
        pub token: String,
        pub logprob: f64,
        #[serde(default)]
        pub top_logprobs: Vec<TopLogprob>,
    }

    #[derive(Debug, Clone, Serialize, Deserialize)]
    pub struct TopLogprob {
        pub token: String,
        pub logprob: f64,
    }

    impl Message {
        pub fn user_text(text: &str) -> Self {
            Self {
                role: "user".into(),
                content: Content::Text(text.to_string()),
            }
        }

        /// Concatenated text parts.
        pub fn text(&self) -> String {
            match &self.content {
                Content::Text(t) => t.clone(),
                Content::Parts(parts) => parts
                    .iter()
                    .filter_map(|p| match p {
                        ContentPart::Text { text } => Some(text.as_str()),
                        ContentPart::ImageUrl { .. } => None,
                    })
                    .collect::<Vec<_>>()
                    .join("\n"),
            }
        }

        pub fn image_urls(&self) -> Vec<&str> {
            match &self.content {
                Content::Text(_) => Vec::new(),
                Content::Parts(parts) => parts
                    .iter()
                    .filter_map(|p| match p {
                        ContentPart::ImageUrl { image_url } => Some(image_url.url.as_str()),
                        ContentPart::Text { .. } => None,
                    })
                    .collect(),
            }
        }
    }
}

pub const PNG_DATA_URL_PREFIX: &str = "data:image/png;base64,";

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_parallelism() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
}

impl BackendConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            parallelism: default_parallelism(),
            retry_backoff_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(BackendError::Config(format!("timeout_secs {} must be > 0", self.timeout_secs)));
        }
        if self.parallelism == 0 {
            return Err(BackendError::Config("parallelism must be >= 1".into()));
        }
        reqwest::Url::parse(&self.endpoint)
            .map_err(|e| BackendError::Config(format!("endpoint {:?}: {e}", self.endpoint)))?;
        if self.model.trim().is_empty() {
            return Err(BackendError::Config("model must be nonempty".into()));
        }
        Ok(())
    }
}

struct ApiKey(String);

impl std::fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    cfg: BackendConfig,
    client: reqwest::Client,
    api_key: Option<ApiKey>,
    templates: Arc<TemplateRegistry>,
}

enum Attempt {
    Done(wire::ChatResponse),
    Retry(BackendError),
    Fail(BackendError),
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig, templates: Arc<TemplateRegistry>) -> Result<Self, BackendError> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(ApiKey(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            })?)),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            cfg,
            client,
            api_key,
            templates,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.cfg.endpoint.trim_end_matches('/'))
    }

    async fn attempt(&self, body: &wire::ChatRequest) -> Attempt {
        let mut req = self.client.post(self.url("chat/completions")).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(&key.0);
        }
        let resp = match req.send().await {
            Ok(resp) => resp,
            Err(e) if e.is_timeout() => return Attempt::Retry(BackendError::Timeout),
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(BackendError::Timeout),
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        match status {
            200..=299 => match serde_json::from_str(&text) {
                Ok(parsed) => Attempt::Done(parsed),
                Err(e) => Attempt::Fail(BackendError::MalformedResponse(e.to_string())),
            },
            401 | 403 => Attempt::Fail(BackendError::AuthFailure(status)),
            429 | 500..=599 => Attempt::Retry(BackendError::Http { status, body: text }),
            404 if text.contains("script_miss") => Attempt::Fail(BackendError::ScriptMiss(text)),
            _ => Attempt::Fail(BackendError::Http { status, body: text }),
        }
    }

    async fn chat(&self, body: &wire::ChatRequest) -> Result<wire::ChatResponse, BackendError> {
        let mut delay = Duration::from_millis(self.cfg.retry_backoff_ms);
        let mut tries = 0;
        loop {
            match self.attempt(body).await {
                Attempt::Done(resp) => return Ok(resp),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if tries >= self.cfg.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("{}: {e}; retrying in {delay:?}", self.cfg.model);
                    tokio::time::sleep(delay).await;
                    delay *= 2;
                    tries += 1;
                }
            }
        }
    }

    async fn text_completion(&self, prompt: &str, max_tokens: u32) -> Result<String, BackendError> {
        let body = wire::ChatRequest {
            model: self.cfg.model.clone(),
            messages: vec![wire::Message::user_text(prompt)],
            temperature: Some(0.0),
            max_tokens: Some(max_tokens),
            logprobs: None,
            top_logprobs: None,
            seed: None,
        };
        let resp = self.chat(&body).await?;
        first_choice(&resp).map(|c| c.message.content.clone().unwrap_or_default())
    }

    async fn entails(&self, premise: &str, hypothesis: &str) -> Result<bool, BackendError> {
        let inputs = super::templates::inputs([("premise", premise), ("hypothesis", hypothesis)]);
        let prompt = self.templates.render(NLI_ENTAILMENT, &inputs)?;
        let label = self.text_completion(&prompt, 8).await?;
        Ok(label.trim().to_ascii_lowercase().starts_with("entail"))
    }
}

fn first_choice(resp: &wire::ChatResponse) -> Result<&wire::Choice, BackendError> {
    resp.choices
        .first()
        .ok_or_else(|| BackendError::MalformedResponse("response has no choices".into()))
}

/// Convert a chat response into text plus token log-probabilities.
pub fn parse_generation(resp: &wire::ChatResponse) -> Result<GenerationResult, BackendError> {
    let choice = first_choice(resp)?;
    let text = choice.message.content.clone().unwrap_or_default();
    let content = choice
        .logprobs
        .as_ref()
        .and_then(|l| l.content.as_ref())
        .ok_or_else(|| BackendError::MalformedResponse("response carries no logprobs".into()))?;
    if content.is_empty() && !text.is_empty() {
        return Err(BackendError::MalformedResponse("empty logprobs for nonempty text".into()));
    }
    let tokens = content
        .iter()
        .map(|t| TokenLogprob {
            logprob: t.logprob.min(0.0),
            top: t.top_logprobs.iter().map(|a| a.logprob.min(0.0)).collect(),
        })
        .collect();
    GenerationResult::new(text, tokens)
}

/// Build the chat request for one VLM sample.
pub fn generation_body(model: &str, req: &GenerationRequest) -> wire::ChatRequest {
    let content = match &req.image {
        Some(png) => wire::Content::Parts(vec![
            wire::ContentPart::ImageUrl {
                image_url: wire::ImageUrl {
                    url: format!(
                        "{PNG_DATA_URL_PREFIX}{}",
                        base64::engine::general_purpose::STANDARD.encode(png)
                    ),
                },
            },
            wire::ContentPart::Text {
                text: req.prompt.clone(),
            },
        ]),
        None => wire::Content::Text(req.prompt.clone()),
    };
    wire::ChatRequest {
        model: model.to_string(),
        messages: vec![wire::Message {
            role: "user".into(),
            content,
        }],
        temperature: Some(req.temperature),
        max_tokens: Some(req.max_tokens),
        logprobs: Some(true),
        top_logprobs: Some(req.top_logprobs),
        seed: req.seed,
    }
}

async fn probe_endpoint(backend: &HttpBackend) -> Result<(), BackendError> {
    let mut req = backend.client.get(backend.url("models"));
    if let Some(key) = &backend.api_key {
        req = req.bearer_auth(&key.0);
    }
    match req.send().await {
        Ok(resp) if matches!(resp.status().as_u16(), 401 | 403) => {
            Err(BackendError::AuthFailure(resp.status().as_u16()))
        }
        Ok(_) => Ok(()),
        Err(e) if e.is_timeout() => Err(BackendError::Timeout),
        Err(e) => Err(BackendError::Transport(e.to_string())),
    }
}

#[async_trait]
impl VisionLanguageModel for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}@{}", self.cfg.model, self.cfg.endpoint)
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let resp = self.chat(&generation_body(&self.cfg.model, req)).await?;
        parse_generation(&resp)
    }

    async fn probe(&self) -> Result<(), BackendError> {
        probe_endpoint(self).await
    }
}

#[async_trait]
impl EntailmentModel for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}@{}", self.cfg.model, self.cfg.endpoint)
    }

    async fn entailment(&self, premise: &str, hypothesis: &str) -> Result<EntailmentVerdict, BackendError> {
        let (forward, backward) = tokio::try_join!(self.entails(premise, hypothesis), self.entails(hypothesis, premise))?;
        Ok(EntailmentVerdict { forward, backward })
    }

    async fn probe(&self) -> Result<(), BackendError> {
        probe_endpoint(self).await
    }
}

#[async_trait]
impl LanguageModel for HttpBackend {
    fn backend_id(&self) -> String {
        format!("http:{}@{}", self.cfg.model, self.cfg.endpoint)
    }

    async fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        self.text_completion(&req.prompt, 2048).await
    }

    async fn probe(&self) -> Result<(), BackendError> {
        probe_endpoint(self).await
    }
}

/// An HTTP backend behind its configured concurrency cap.
pub fn connect(cfg: &BackendConfig, templates: Arc<TemplateRegistry>) -> Result<Throttled<HttpBackend>, BackendError> {
    let cap = cfg.parallelism;
    Ok(Throttled::new(HttpBackend::new(cfg.clone(), templates)?, cap))
}
