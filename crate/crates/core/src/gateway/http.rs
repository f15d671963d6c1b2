//! Request bodies and reply decoding for the chat-completions and generate
//! wire protocols.

use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{BackendConfig, TransportError, TransportErrorKind};
use crate::prompt::{tool_schema, GrammarKind, RenderedPrompt, TOOL_NAME};

/// Tools are only offered when the answer is a single label.
pub fn wants_tools(config: &BackendConfig, prompt: &RenderedPrompt) -> bool {
    config.use_tools
        && matches!(
            prompt.answer_grammar.kind,
            GrammarKind::SingleLabel | GrammarKind::SingleLabelInverse
        )
}

pub fn chat_body(config: &BackendConfig, prompt: &RenderedPrompt) -> Value {
    let messages: Vec<Value> = prompt
        .segments
        .iter()
        .map(|s| json!({"role": s.role.name(), "content": s.content}))
        .collect();
    let mut body = json!({
        "model": config.model,
        "messages": messages,
        "temperature": config.temperature,
        "max_tokens": config.max_new_tokens,
    });
    if wants_tools(config, prompt) {
        body["tools"] = json!([tool_schema(&prompt.scheme).to_json()]);
        body["tool_choice"] = json!({"type": "function", "function": {"name": TOOL_NAME}});
    }
    body
}

/// Text-generation servers reject a zero temperature, so greedy decoding is
/// requested with `do_sample: false` instead.
pub fn generate_body(config: &BackendConfig, prompt: &RenderedPrompt) -> Value {
    let mut parameters = json!({"max_new_tokens": config.max_new_tokens});
    if config.temperature > 0.0 {
        parameters["temperature"] = json!(config.temperature);
        parameters["do_sample"] = json!(true);
    } else {
        parameters["do_sample"] = json!(false);
    }
    json!({"inputs": prompt.flatten(), "parameters": parameters})
}

fn protocol_error(message: impl Into<String>) -> TransportError {
    TransportError::new(TransportErrorKind::Protocol, message)
}

/// Reads the assistant content, or the `emotion` argument of the first tool
/// call when one is present.
pub fn parse_chat_reply(body: &str) -> Result<String, TransportError> {
    let v: Value = serde_json::from_str(body).map_err(|e| protocol_error(format!("reply is not JSON: {e}")))?;
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| protocol_error("reply has no choices[0].message"))?;
    if let Some(call) = message.pointer("/tool_calls/0/function/arguments") {
        let args = match call {
            Value::String(s) => serde_json::from_str(s).map_err(|e| protocol_error(format!("tool arguments: {e}")))?,
            other => other.clone(),
        };
        return args
            .get("emotion")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| protocol_error("tool call has no `emotion` argument"));
    }
    message
        .get("content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| protocol_error("reply has neither content nor tool call"))
}

pub fn parse_generate_reply(body: &str) -> Result<String, TransportError> {
    let v: Value = serde_json::from_str(body).map_err(|e| protocol_error(format!("reply is not JSON: {e}")))?;
    let item = match &v {
        Value::Array(items) => items.first().unwrap_or(&Value::Null),
        other => other,
    };
    item.get("generated_text")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| protocol_error("reply has no generated_text"))
}

pub fn classify_status(status: StatusCode, body: &str) -> TransportError {
    let kind = match status.as_u16() {
        401 | 403 => TransportErrorKind::Unauthorized,
        408 => TransportErrorKind::Timeout,
        429 => TransportErrorKind::RateLimited,
        500..=599 => TransportErrorKind::Server,
        _ => TransportErrorKind::Http,
    };
    let snippet: String = body.chars().take(200).collect();
    TransportError::new(kind, format!("HTTP {status}: {snippet}"))
}

pub fn classify_reqwest(err: &reqwest::Error) -> TransportError {
    let kind = if err.is_timeout() {
        TransportErrorKind::Timeout
    } else {
        TransportErrorKind::Connection
    };
    TransportError::new(kind, err.to_string())
}

pub fn endpoint(base: &str, path: &str) -> String {
    format!("{}{}", base.trim_end_matches('/'), path)
}
