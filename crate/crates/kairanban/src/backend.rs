//! Model backends: a real HTTP client and a scripted stand-in.
//!
//! Both implement [`Backend`], the only interface the orchestrator sees. The
//! HTTP client targets the widely used chat-completions wire shape (`POST
//! {base}/v1/chat/completions`, reply text at `choices[0].message.content`).
//! The scripted backend replays canned replies for offline, byte-reproducible
//! runs.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;
use tokio::time::Instant;

/// Default cap on concurrently outstanding HTTP requests.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Default token budget per completion.
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

/// Errors surfaced by a backend.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication rejected (HTTP {status})")]
    Auth { status: u16 },
    #[error("rate limited (HTTP 429): {detail}")]
    RateLimited { detail: String },
    #[error("unexpected HTTP status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("response shape not understood: {0}")]
    MalformedResponse(String),
    #[error("scripted backend ran out of replies after {consumed} calls")]
    ScriptExhausted { consumed: usize },
    #[error("no scripted reply for fingerprint {fingerprint}")]
    FingerprintMiss { fingerprint: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    /// Whether the retry loop should try again. Auth failures and malformed
    /// requests are terminal; transient transport trouble, rate limiting,
    /// and server errors are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::RateLimited { .. } => true,
            BackendError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Message role in a chat-style request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

/// One chat message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// A completion request. `temperature` defaults to 0.0 — runs are meant to be
/// as deterministic as the backend allows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// All message contents joined with a newline; the text the fingerprint
    /// is computed over.
    pub fn concatenated_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Stable hex fingerprint of the message contents (first 16 hex digits of
    /// their SHA-256). Used to key scripted replies to specific prompts.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.concatenated_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens is zero".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} is invalid",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A completed call: the reply text plus bookkeeping for transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    /// Wall-clock duration of the call including retries; the scripted
    /// backend reports 0 so transcripts stay byte-stable.
    pub latency_ms: u64,
    /// Number of attempts made, at least 1.
    pub attempt_count: u32,
}

/// The single interface the orchestrator calls.
#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, BackendError>;
}

/// Exponential backoff with jitter for the HTTP backend.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    /// Retries after the first attempt (so up to `1 + max_retries` attempts).
    pub max_retries: u32,
    /// Delay before the first retry; doubles each further retry.
    pub base_delay: Duration,
    /// Uniform jitter applied multiplicatively, e.g. 0.2 for plus or minus 20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based), jittered.
    pub fn delay_before_retry(&self, retry: u32) -> Duration {
        let scale = 2u32.saturating_pow(retry.saturating_sub(1));
        let nominal = self.base_delay.saturating_mul(scale);
        let factor = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        nominal.mul_f64(factor.max(0.0))
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

/// HTTP backend for chat-completions-compatible servers.
pub struct HttpBackend {
    client: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    limiter: Semaphore,
}

impl HttpBackend {
    /// Creates a backend for `base_url` (e.g. `http://localhost:8000`); the
    /// chat-completions path is appended automatically.
    pub fn new(base_url: &str, api_key: Option<String>) -> Self {
        Self {
            client: reqwest::Client::new(),
            endpoint: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            policy: RetryPolicy::default(),
            limiter: Semaphore::new(DEFAULT_MAX_IN_FLIGHT),
        }
    }

    /// Replaces the retry policy (tests shrink the delays).
    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    /// Caps concurrently outstanding requests.
    pub fn with_max_in_flight(mut self, permits: usize) -> Self {
        self.limiter = Semaphore::new(permits.max(1));
        self
    }

    async fn send_once(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let body = WireRequest {
            model: &request.model,
            messages: request
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: m.role.as_str(),
                    content: &m.content,
                })
                .collect(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let mut http = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 401 || status == 403 {
            return Err(BackendError::Auth { status });
        }
        let body_text = response
            .text()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == 429 {
            return Err(BackendError::RateLimited { detail: body_text });
        }
        if !(200..300).contains(&status) {
            return Err(BackendError::Http {
                status,
                body: body_text,
            });
        }
        let parsed: WireResponse = serde_json::from_str(&body_text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("no choices[0].message.content".into()))
    }
}

#[async_trait]
impl Backend for HttpBackend {
    async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let _permit = self
            .limiter
            .acquire()
            .await
            .expect("request limiter is never closed");
        let start = Instant::now();
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            match self.send_once(request).await {
                Ok(text) => {
                    return Ok(CompletionResponse {
                        text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    });
                }
                Err(err) if err.is_retryable() && attempt <= self.policy.max_retries => {
                    tokio::time::sleep(self.policy.delay_before_retry(attempt)).await;
                }
                Err(err) => return Err(err),
            }
        }
    }
}

#[derive(Default)]
struct ScriptState {
    queue: VecDeque<String>,
    by_fingerprint: HashMap<String, String>,
    consumed: usize,
    requests: Vec<CompletionRequest>,
}

/// Deterministic backend that replays canned replies.
///
/// Replies keyed by prompt fingerprint win over the queue; unkeyed replies
/// are consumed front to back. Every incoming request is recorded for
/// later inspection. Responses always report zero latency and one attempt so
/// transcripts are byte-stable across runs.
#[derive(Default)]
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    /// Backend that replays `replies` in order.
    pub fn from_replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let state = ScriptState {
            queue: replies.into_iter().map(Into::into).collect(),
            ..ScriptState::default()
        };
        Self {
            state: Mutex::new(state),
        }
    }

    /// Backend that answers only requests whose fingerprint is in `map`.
    pub fn from_fingerprints<I, K, V>(map: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let state = ScriptState {
            by_fingerprint: map.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            ..ScriptState::default()
        };
        Self {
            state: Mutex::new(state),
        }
    }

    /// Backend mixing fingerprint-keyed replies with an ordered queue.
    pub fn with_parts(queue: Vec<String>, by_fingerprint: HashMap<String, String>) -> Self {
        let state = ScriptState {
            queue: queue.into(),
            by_fingerprint,
            consumed: 0,
            requests: Vec::new(),
        };
        Self {
            state: Mutex::new(state),
        }
    }

    /// Replies served so far.
    pub fn consumed(&self) -> usize {
        self.state.lock().expect("script state poisoned").consumed
    }

    /// Unkeyed replies still queued.
    pub fn remaining(&self) -> usize {
        self.state
            .lock()
            .expect("script state poisoned")
            .queue
            .len()
    }

    /// Copies of every request seen, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.state
            .lock()
            .expect("script state poisoned")
            .requests
            .clone()
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn complete(
        &self,
        request: &CompletionRequest,
    ) -> Result<CompletionResponse, BackendError> {
        request.validate()?;
        let mut state = self.state.lock().expect("script state poisoned");
        state.requests.push(request.clone());
        let fingerprint = request.fingerprint();
        let text = if let Some(reply) = state.by_fingerprint.get(&fingerprint) {
            reply.clone()
        } else if let Some(reply) = state.queue.pop_front() {
            reply
        } else if !state.by_fingerprint.is_empty() {
            return Err(BackendError::FingerprintMiss { fingerprint });
        } else {
            return Err(BackendError::ScriptExhausted {
                consumed: state.consumed,
            });
        };
        state.consumed += 1;
        Ok(CompletionResponse {
            text,
            latency_ms: 0,
            attempt_count: 1,
        })
    }
}
