//! Prompt submission to model backends.
//!
//! A [`Gateway`] wraps one backend (chat-completions or generate over HTTP,
//! or an in-process [`MockBackend`]) together with its retry, rate-limit and
//! caching behavior. [`Gateway::run_batch`] fans prompts out over a bounded
//! pool and returns the replies in input order.

pub mod http;
pub mod mock;
pub mod server;

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Mutex;
use tokio::time::Instant;

use crate::prompt::RenderedPrompt;

pub use mock::{oracle_answer, MockBackend, MockBehavior, MockStats};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend `{backend}`: {message}")]
    InvalidConfig { backend: String, message: String },
    #[error("backend `{backend}`: environment variable `{var}` is not set")]
    MissingKey { backend: String, var: String },
    #[error("backend `{backend}`: {source}")]
    Client {
        backend: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Chat,
    Generate,
    Mock,
}

fn default_max_new_tokens() -> u32 {
    64
}

fn default_timeout_secs() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub protocol: Protocol,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub use_tools: bool,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Requests per second across all workers; unlimited when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_limit_rps: Option<f64>,
}

impl BackendConfig {
    pub fn new(
        name: impl Into<String>,
        protocol: Protocol,
        base_url: Option<String>,
        model: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            protocol,
            base_url,
            model: model.into(),
            auth_env: None,
            temperature: 0.0,
            max_new_tokens: default_max_new_tokens(),
            use_tools: false,
            timeout_secs: default_timeout_secs(),
            rate_limit_rps: None,
        }
    }

    pub fn mock(name: impl Into<String>) -> Self {
        Self::new(name, Protocol::Mock, None, "mock")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |message: &str| GatewayError::InvalidConfig {
            backend: self.name.clone(),
            message: message.to_string(),
        };
        if self.name.trim().is_empty() {
            return Err(invalid("name must not be empty"));
        }
        if self.protocol != Protocol::Mock && self.base_url.as_deref().is_none_or(|u| u.trim().is_empty()) {
            return Err(invalid("base_url is required for chat and generate backends"));
        }
        if self.use_tools && self.protocol != Protocol::Chat {
            return Err(invalid("use_tools is only valid with protocol `chat`"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be a non-negative number"));
        }
        if self.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens must be positive"));
        }
        if self.timeout_secs == 0 {
            return Err(invalid("timeout_secs must be positive"));
        }
        if self.rate_limit_rps.is_some_and(|r| !(r > 0.0 && r.is_finite())) {
            return Err(invalid("rate_limit_rps must be positive"));
        }
        Ok(())
    }
}

/// Error classes a policy may choose to retry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetryClass {
    Timeout,
    #[serde(rename = "http-429")]
    Http429,
    #[serde(rename = "http-5xx")]
    Http5xx,
    Connection,
}

fn default_retry_on() -> BTreeSet<RetryClass> {
    [
        RetryClass::Timeout,
        RetryClass::Http429,
        RetryClass::Http5xx,
        RetryClass::Connection,
    ]
    .into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub backoff_factor: f64,
    #[serde(default = "default_retry_on")]
    pub retry_on: BTreeSet<RetryClass>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 500,
            backoff_factor: 2.0,
            retry_on: default_retry_on(),
        }
    }
}

impl RetryPolicy {
    pub fn no_retry() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_attempts == 0 {
            return Err("policy.max_attempts must be at least 1".into());
        }
        if !(self.backoff_factor >= 1.0 && self.backoff_factor.is_finite()) {
            return Err("policy.backoff_factor must be at least 1".into());
        }
        Ok(())
    }

    /// Wait after the failed attempt number `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(64) as i32;
        let ms = self.base_backoff_ms as f64 * self.backoff_factor.powi(exp);
        Duration::from_secs_f64((ms / 1000.0).min(3600.0))
    }

    pub fn retries(&self, kind: TransportErrorKind) -> bool {
        kind.retry_class().is_some_and(|c| self.retry_on.contains(&c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportErrorKind {
    Timeout,
    RateLimited,
    Server,
    Connection,
    Unauthorized,
    Http,
    Protocol,
    ScriptedGap,
}

impl TransportErrorKind {
    pub fn retry_class(self) -> Option<RetryClass> {
        match self {
            TransportErrorKind::Timeout => Some(RetryClass::Timeout),
            TransportErrorKind::RateLimited => Some(RetryClass::Http429),
            TransportErrorKind::Server => Some(RetryClass::Http5xx),
            TransportErrorKind::Connection => Some(RetryClass::Connection),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub message: String,
}

impl TransportError {
    pub fn new(kind: TransportErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResponse {
    pub sample_id: u64,
    /// Set exactly when `transport_error` is not.
    pub text: Option<String>,
    pub transport_error: Option<TransportError>,
    pub latency: Duration,
    /// Network attempts made; zero for a cache hit.
    pub attempts: u32,
    pub cached: bool,
}

impl RawResponse {
    /// Everything except timing, for comparing runs.
    pub fn content(&self) -> (u64, Option<&str>, Option<&TransportError>) {
        (self.sample_id, self.text.as_deref(), self.transport_error.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStatus {
    Ok,
    Unreachable,
    Unauthorized,
}

/// Spaces request starts at least `1 / rps` apart, with no burst allowance.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(rps: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / rps),
            next_slot: Mutex::new(None),
        }
    }

    pub async fn acquire(&self) {
        let slot = {
            let mut next = self.next_slot.lock().await;
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
}

/// On-disk reply cache: one file per key, written atomically.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, key: &str) -> Option<String> {
        std::fs::read_to_string(self.dir.join(key)).ok()
    }

    pub fn put(&self, key: &str, text: &str) -> std::io::Result<()> {
        use std::io::Write;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(text.as_bytes())?;
        tmp.persist(self.dir.join(key)).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        std::fs::read_dir(&self.dir)
            .map(|d| d.filter_map(Result::ok).filter(|e| e.path().is_file()).count())
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SHA-256 over backend name, model and the exact prompt bytes. Mock
/// backends answer per sample, so their key also covers the sample id.
pub fn cache_key(config: &BackendConfig, sample_id: u64, prompt: &RenderedPrompt) -> String {
    let mut h = Sha256::new();
    h.update(config.name.as_bytes());
    h.update([0]);
    h.update(config.model.as_bytes());
    h.update([0]);
    h.update(prompt.flatten().as_bytes());
    if config.protocol == Protocol::Mock {
        h.update([0]);
        h.update(sample_id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
enum Transport {
    Http {
        client: reqwest::Client,
        key: Option<String>,
    },
    Mock(Arc<MockBackend>),
}

#[derive(Debug)]
pub struct Gateway {
    config: BackendConfig,
    transport: Transport,
    cache: Option<ResponseCache>,
    limiter: Option<RateLimiter>,
}

impl Gateway {
    /// An HTTP backend. The key named by `auth_env` is resolved here, before
    /// any request is made.
    pub fn connect(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        if config.protocol == Protocol::Mock {
            return Err(GatewayError::InvalidConfig {
                backend: config.name.clone(),
                message: "mock backends are built with Gateway::mock".into(),
            });
        }
        let key = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingKey {
                backend: config.name.clone(),
                var: var.clone(),
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|source| GatewayError::Client {
                backend: config.name.clone(),
                source,
            })?;
        Ok(Self::assemble(config, Transport::Http { client, key }))
    }

    pub fn mock(config: BackendConfig, backend: Arc<MockBackend>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Self::assemble(config, Transport::Mock(backend)))
    }

    fn assemble(config: BackendConfig, transport: Transport) -> Self {
        let limiter = config.rate_limit_rps.map(RateLimiter::new);
        Self {
            config,
            transport,
            cache: None,
            limiter,
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn mock_backend(&self) -> Option<&Arc<MockBackend>> {
        match &self.transport {
            Transport::Mock(m) => Some(m),
            Transport::Http { .. } => None,
        }
    }

    async fn send_once(&self, sample_id: u64, prompt: &RenderedPrompt, attempt: u32) -> Result<String, TransportError> {
        let (client, key) = match &self.transport {
            Transport::Mock(m) => return m.reply(sample_id, prompt, attempt).await,
            Transport::Http { client, key } => (client, key),
        };
        let base = self.config.base_url.as_deref().unwrap_or_default();
        let (url, body) = match self.config.protocol {
            Protocol::Chat => (
                http::endpoint(base, "/v1/chat/completions"),
                http::chat_body(&self.config, prompt),
            ),
            _ => (
                http::endpoint(base, "/generate"),
                http::generate_body(&self.config, prompt),
            ),
        };
        let mut req = client.post(url).json(&body);
        if let Some(key) = key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(|e| http::classify_reqwest(&e))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| http::classify_reqwest(&e))?;
        if !status.is_success() {
            return Err(http::classify_status(status, &text));
        }
        match self.config.protocol {
            Protocol::Chat => http::parse_chat_reply(&text),
            _ => http::parse_generate_reply(&text),
        }
    }

    /// Submits one prompt, retrying per `policy`. Failures end up in the
    /// returned response rather than as an error.
    pub async fn submit(&self, sample_id: u64, prompt: &RenderedPrompt, policy: &RetryPolicy) -> RawResponse {
        let start = Instant::now();
        let key = self.cache.as_ref().map(|_| cache_key(&self.config, sample_id, prompt));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(text) = cache.get(key) {
                return RawResponse {
                    sample_id,
                    text: Some(text),
                    transport_error: None,
                    latency: start.elapsed(),
                    attempts: 0,
                    cached: true,
                };
            }
        }
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire().await;
            }
            let result = self.send_once(sample_id, prompt, attempt).await;
            let error = match result {
                Ok(text) => {
                    if let (Some(cache), Some(key)) = (&self.cache, &key) {
                        if let Err(e) = cache.put(key, &text) {
                            tracing::warn!(backend = %self.config.name, "cache write failed: {e}");
                        }
                    }
                    return RawResponse {
                        sample_id,
                        text: Some(text),
                        transport_error: None,
                        latency: start.elapsed(),
                        attempts: attempt,
                        cached: false,
                    };
                }
                Err(e) => e,
            };
            if attempt >= policy.max_attempts || !policy.retries(error.kind) {
                tracing::debug!(backend = %self.config.name, sample_id, attempt, "giving up: {error}");
                return RawResponse {
                    sample_id,
                    text: None,
                    transport_error: Some(error),
                    latency: start.elapsed(),
                    attempts: attempt,
                    cached: false,
                };
            }
            tokio::time::sleep(policy.delay(attempt)).await;
        }
    }

    /// Submits every prompt with at most `parallelism` in flight, calling
    /// `on_done(index, response)` as each completes. Returns early, with the
    /// responses gathered so far, once `on_done` returns `false`.
    pub async fn run_batch_each<F>(
        &self,
        prompts: &[(u64, RenderedPrompt)],
        parallelism: usize,
        policy: &RetryPolicy,
        mut on_done: F,
    ) -> Vec<Option<RawResponse>>
    where
        F: FnMut(usize, &RawResponse) -> bool,
    {
        let mut out: Vec<Option<RawResponse>> = vec![None; prompts.len()];
        let mut pending = stream::iter(prompts.iter().enumerate())
            .map(|(i, (id, p))| async move { (i, self.submit(*id, p, policy).await) })
            .buffer_unordered(parallelism.max(1));
        while let Some((i, resp)) = pending.next().await {
            let keep_going = on_done(i, &resp);
            out[i] = Some(resp);
            if !keep_going {
                break;
            }
        }
        out
    }

    /// One response per prompt, in input order.
    pub async fn run_batch(
        &self,
        prompts: &[(u64, RenderedPrompt)],
        parallelism: usize,
        policy: &RetryPolicy,
    ) -> Vec<RawResponse> {
        self.run_batch_each(prompts, parallelism, policy, |_, _| true)
            .await
            .into_iter()
            .map(|r| r.expect("uninterrupted batch answers every prompt"))
            .collect()
    }

    /// A single unretried probe of the backend.
    pub async fn health_check(&self) -> HealthStatus {
        let (client, key) = match &self.transport {
            Transport::Mock(_) => return HealthStatus::Ok,
            Transport::Http { client, key } => (client, key),
        };
        let base = self.config.base_url.as_deref().unwrap_or_default();
        let path = match self.config.protocol {
            Protocol::Chat => "/v1/models",
            _ => "/health",
        };
        let mut req = client
            .get(http::endpoint(base, path))
            .timeout(Duration::from_secs(self.config.timeout_secs.min(10)));
        if let Some(key) = key {
            req = req.bearer_auth(key);
        }
        match req.send().await {
            Ok(resp) if matches!(resp.status().as_u16(), 401 | 403) => HealthStatus::Unauthorized,
            Ok(_) => HealthStatus::Ok,
            Err(_) => HealthStatus::Unreachable,
        }
    }
}
