//! The mock backend exposed over HTTP, speaking both wire protocols.
//!
//! Requests carry no sample ids, so the server recovers the sentence from
//! the prompt, looks its gold label up in the dataset, and works out which
//! grammar was asked for by re-rendering the candidate prompts.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use super::mock::{behavior_reply, MockBehavior, MockStats};
use super::{TransportError, TransportErrorKind};
use crate::dataset::Sample;
use crate::prompt::{
    extract_sentence, DialectKind, ModelDialect, PromptEngine, PromptStrategy, RenderedPrompt, TOOL_NAME,
};
use crate::taxonomy::{scheme_for, Emotion};

#[derive(Debug)]
pub struct MockServerState {
    behavior: MockBehavior,
    /// text → (first sample id carrying it, gold)
    corpus: HashMap<String, (u64, Emotion)>,
    engine: PromptEngine,
    api_key: Option<String>,
    attempts: Mutex<HashMap<String, u32>>,
    stats: MockStats,
}

impl MockServerState {
    pub fn new(behavior: MockBehavior, samples: &[Sample]) -> Result<Self, String> {
        if matches!(behavior, MockBehavior::Scripted { .. }) {
            return Err("scripted replies are keyed by sample id and cannot be served over HTTP".into());
        }
        behavior.validate()?;
        let mut corpus = HashMap::new();
        for s in samples {
            corpus.entry(s.text.clone()).or_insert((s.id, s.gold));
        }
        Ok(Self {
            behavior,
            corpus,
            engine: PromptEngine::default(),
            api_key: None,
            attempts: Mutex::new(HashMap::new()),
            stats: MockStats::default(),
        })
    }

    /// Requests must then carry `Authorization: Bearer <key>`.
    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_engine(mut self, engine: PromptEngine) -> Self {
        self.engine = engine;
        self
    }

    pub fn stats(&self) -> &MockStats {
        &self.stats
    }

    fn authorized(&self, headers: &HeaderMap) -> bool {
        let Some(key) = &self.api_key else {
            return true;
        };
        headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == key)
    }

    /// The rendered prompt that `matches`, else a basic six-class prompt.
    fn infer_prompt(&self, sentence: &str, matches: impl Fn(&RenderedPrompt) -> bool) -> RenderedPrompt {
        for dialect in DialectKind::ALL {
            let dialect = ModelDialect::new(dialect);
            for strategy in PromptStrategy::ALL {
                for k in [6, 3, 2] {
                    if strategy == PromptStrategy::Inverse && k != 6 {
                        continue;
                    }
                    let scheme = scheme_for(k).expect("supported k");
                    let p = self.engine.render(strategy, &dialect, &scheme, sentence);
                    if matches(&p) {
                        return p;
                    }
                }
            }
        }
        self.engine.render(
            PromptStrategy::Basic,
            &ModelDialect::new(DialectKind::PlainInstruct),
            &scheme_for(6).expect("supported k"),
            sentence,
        )
    }

    fn answer(&self, request_key: &str, sentence: &str, prompt: &RenderedPrompt) -> Result<String, TransportError> {
        let attempt = {
            let mut attempts = self.attempts.lock().expect("attempt table poisoned");
            let n = attempts.entry(request_key.to_string()).or_insert(0);
            *n += 1;
            *n
        };
        let (id, gold) = match self.corpus.get(sentence) {
            Some(&(id, gold)) => (id, Some(gold)),
            None => (u64::MAX, None),
        };
        behavior_reply(&self.behavior, id, gold, prompt, attempt)
    }
}

fn failure_response(e: &TransportError, sentence: &str) -> Response {
    match e.kind {
        TransportErrorKind::Server => error_response(StatusCode::SERVICE_UNAVAILABLE, &e.message),
        _ => error_response(
            StatusCode::UNPROCESSABLE_ENTITY,
            &format!("unknown sentence: {sentence:?}"),
        ),
    }
}

fn error_response(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({"error": {"message": message}}))).into_response()
}

fn unauthorized() -> Response {
    error_response(StatusCode::UNAUTHORIZED, "invalid or missing API key")
}

async fn chat(State(state): State<Arc<MockServerState>>, headers: HeaderMap, body: Bytes) -> Response {
    let _guard = state.stats.enter();
    if !state.authorized(&headers) {
        return unauthorized();
    }
    let Ok(req) = serde_json::from_slice::<Value>(&body) else {
        return error_response(StatusCode::BAD_REQUEST, "request body is not JSON");
    };
    let Some(messages) = req.get("messages").and_then(Value::as_array) else {
        return error_response(StatusCode::BAD_REQUEST, "missing `messages`");
    };
    let contents: Vec<&str> = messages
        .iter()
        .map(|m| m.get("content").and_then(Value::as_str).unwrap_or_default())
        .collect();
    let Some(user) = messages
        .iter()
        .rev()
        .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))
        .and_then(|m| m.get("content").and_then(Value::as_str))
    else {
        return error_response(StatusCode::BAD_REQUEST, "no user message");
    };
    let sentence = extract_sentence(user);
    let prompt = state.infer_prompt(sentence, |p| {
        p.segments.len() == contents.len() && p.segments.iter().zip(&contents).all(|(s, c)| s.content == *c)
    });
    let answer = match state.answer(&contents.join("\u{0}"), sentence, &prompt) {
        Ok(a) => a,
        Err(e) => return failure_response(&e, sentence),
    };
    let model = req.get("model").cloned().unwrap_or(Value::Null);
    let message = if req
        .get("tools")
        .is_some_and(|t| t.as_array().is_some_and(|a| !a.is_empty()))
    {
        json!({
            "role": "assistant",
            "content": null,
            "tool_calls": [{
                "id": "call_0",
                "type": "function",
                "function": {"name": TOOL_NAME, "arguments": json!({"emotion": answer}).to_string()}
            }]
        })
    } else {
        json!({"role": "assistant", "content": answer})
    };
    Json(json!({
        "id": "chatcmpl-mock",
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": message, "finish_reason": "stop"}]
    }))
    .into_response()
}

async fn generate(State(state): State<Arc<MockServerState>>, headers: HeaderMap, body: Bytes) -> Response {
    let _guard = state.stats.enter();
    if !state.authorized(&headers) {
        return unauthorized();
    }
    let Some(inputs) = serde_json::from_slice::<Value>(&body)
        .ok()
        .and_then(|v| v.get("inputs").and_then(Value::as_str).map(str::to_string))
    else {
        return error_response(StatusCode::BAD_REQUEST, "missing `inputs`");
    };
    let sentence = extract_sentence(&inputs);
    let prompt = state.infer_prompt(sentence, |p| p.flatten() == inputs);
    match state.answer(&inputs, sentence, &prompt) {
        Ok(answer) => Json(json!({"generated_text": answer})).into_response(),
        Err(e) => failure_response(&e, sentence),
    }
}

async fn models(State(state): State<Arc<MockServerState>>, headers: HeaderMap) -> Response {
    if !state.authorized(&headers) {
        return unauthorized();
    }
    Json(json!({"object": "list", "data": [{"id": "mock", "object": "model"}]})).into_response()
}

async fn health(State(state): State<Arc<MockServerState>>, headers: HeaderMap) -> Response {
    if !state.authorized(&headers) {
        return unauthorized();
    }
    Json(json!({"status": "ok"})).into_response()
}

pub fn router(state: Arc<MockServerState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/generate", post(generate))
        .route("/v1/models", get(models))
        .route("/health", get(health))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<MockServerState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

/// Binds an ephemeral local port and serves in the background.
pub async fn spawn(
    state: Arc<MockServerState>,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    Ok((addr, tokio::spawn(serve(listener, state))))
}
