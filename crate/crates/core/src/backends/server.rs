//! Serve a mock [`Script`] as an OpenAI-compatible endpoint.
//!
//! Requests are routed by content: prompts rendered from the NLI template are
//! answered from the entailment table, prompts matching a scripted LLM
//! completion (or its repair prompt) get that reply, and everything else is a
//! VLM generation keyed by the SHA-256 of the attached PNG.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use super::http::{wire, PNG_DATA_URL_PREFIX};
use super::mock::{MockBackend, Script};
use super::structured::repair_prompt;
use super::templates::{inputs, TemplateRegistry, NLI_ENTAILMENT};
use super::BackendError;

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Answer the first `fail_first` chat requests with HTTP 503.
    pub fail_first: usize,
}

struct NliShape {
    prefix: String,
    middle: String,
    suffix: String,
}

impl NliShape {
    fn new(templates: &TemplateRegistry) -> Self {
        const P: &str = "\u{1}PREMISE\u{1}";
        const H: &str = "\u{1}HYPOTHESIS\u{1}";
        let rendered = templates
            .render(NLI_ENTAILMENT, &inputs([("premise", P), ("hypothesis", H)]))
            .expect("NLI template renders");
        let (prefix, rest) = rendered.split_once(P).expect("premise slot present");
        let (middle, suffix) = rest.split_once(H).expect("hypothesis slot present");
        Self {
            prefix: prefix.to_string(),
            middle: middle.to_string(),
            suffix: suffix.to_string(),
        }
    }

    fn parse<'a>(&self, text: &'a str) -> Option<(&'a str, &'a str)> {
        let body = text.strip_prefix(self.prefix.as_str())?.strip_suffix(self.suffix.as_str())?;
        body.split_once(self.middle.as_str())
    }
}

struct ServerState {
    mock: MockBackend,
    nli: NliShape,
    completions: HashMap<String, String>,
    fail_remaining: AtomicUsize,
    requests: AtomicUsize,
}

impl ServerState {
    fn new(script: Script, templates: &TemplateRegistry, opts: &ServerOptions) -> Self {
        let mut completions = HashMap::new();
        for entry in &script.llm {
            let Ok(prompt) = templates.render(&entry.template_id, &entry.inputs) else {
                log::warn!("script completion for {} does not render; skipped", entry.template_id);
                continue;
            };
            let first = entry.reply(0);
            if let Ok(repair) = repair_prompt(templates, &prompt, &first) {
                completions.insert(repair, entry.reply(1));
            }
            completions.insert(prompt, first);
        }
        Self {
            mock: MockBackend::new(script),
            nli: NliShape::new(templates),
            completions,
            fail_remaining: AtomicUsize::new(opts.fail_first),
            requests: AtomicUsize::new(0),
        }
    }
}

fn error_response(status: StatusCode, kind: &str, message: String) -> Response {
    (status, Json(json!({"error": {"type": kind, "message": message}}))).into_response()
}

fn text_response(model: &str, text: &str) -> Response {
    Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "created": 0,
        "model": model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
    }))
    .into_response()
}

fn decode_image(url: &str) -> Result<Vec<u8>, String> {
    let b64 = url
        .strip_prefix(PNG_DATA_URL_PREFIX)
        .ok_or_else(|| "image_url must be a base64 PNG data URL".to_string())?;
    base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| e.to_string())
}

async fn chat(State(state): State<Arc<ServerState>>, Json(req): Json<wire::ChatRequest>) -> Response {
    state.requests.fetch_add(1, Ordering::SeqCst);
    if state
        .fail_remaining
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
    {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "unavailable", "injected failure".into());
    }
    let Some(message) = req.messages.last() else {
        return error_response(StatusCode::BAD_REQUEST, "invalid_request", "no messages".into());
    };
    let text = message.text();

    if let Some((premise, hypothesis)) = state.nli.parse(&text) {
        return match state.mock.lookup_entailment(premise, hypothesis) {
            Ok(v) => text_response(&req.model, if v.forward { "entailment" } else { "neutral" }),
            Err(e) => error_response(StatusCode::NOT_FOUND, "script_miss", e.to_string()),
        };
    }
    if let Some(reply) = state.completions.get(&text) {
        return text_response(&req.model, reply);
    }

    let image = match message.image_urls().first() {
        Some(url) => match decode_image(url) {
            Ok(bytes) => Some(bytes),
            Err(e) => return error_response(StatusCode::BAD_REQUEST, "invalid_request", e),
        },
        None => None,
    };
    let digest = crate::perturb::image_digest(image.as_deref());
    let temperature = req.temperature.unwrap_or(1.0);
    let generation = match state.mock.lookup_generation(&digest, &text, temperature) {
        Ok(g) => g,
        Err(e) => return error_response(StatusCode::NOT_FOUND, "script_miss", e.to_string()),
    };
    let result = match generation.result() {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, "bad_script", e.to_string()),
    };
    let tokens: Vec<_> = result
        .tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let top: Vec<_> = t
                .top
                .iter()
                .enumerate()
                .map(|(k, lp)| json!({"token": format!("t{i}_{k}"), "logprob": lp}))
                .collect();
            json!({"token": format!("t{i}"), "logprob": t.logprob, "top_logprobs": top})
        })
        .collect();
    Json(json!({
        "id": "mock",
        "object": "chat.completion",
        "created": 0,
        "model": req.model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": result.text},
            "logprobs": {"content": tokens},
            "finish_reason": "stop",
        }],
    }))
    .into_response()
}

async fn models() -> Json<serde_json::Value> {
    Json(json!({"object": "list", "data": [{"id": "mock", "object": "model"}]}))
}

pub fn router(script: Script, templates: &TemplateRegistry, opts: &ServerOptions) -> Router {
    let state = Arc::new(ServerState::new(script, templates, opts));
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/chat/completions", post(chat))
        .route("/v1/models", get(models))
        .route("/models", get(models))
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(
    listener: TcpListener,
    script: Script,
    templates: &TemplateRegistry,
    opts: &ServerOptions,
) -> Result<(), BackendError> {
    axum::serve(listener, router(script, templates, opts))
        .await
        .map_err(|e| BackendError::Transport(e.to_string()))
}

/// A mock server running on a background task.
pub struct MockServer {
    pub addr: SocketAddr,
    task: JoinHandle<()>,
}

impl MockServer {
    /// Bind an ephemeral localhost port and start serving.
    pub async fn spawn(script: Script, templates: &TemplateRegistry, opts: ServerOptions) -> Result<Self, BackendError> {
        let listener = TcpListener::bind("127.0.0.1:0")
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| BackendError::Transport(e.to_string()))?;
        let app = router(script, templates, &opts);
        let task = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                log::error!("mock server stopped: {e}");
            }
        });
        Ok(Self { addr, task })
    }

    /// Base URL suitable for [`super::http::BackendConfig::endpoint`].
    pub fn endpoint(&self) -> String {
        format!("http://{}/v1", self.addr)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}
