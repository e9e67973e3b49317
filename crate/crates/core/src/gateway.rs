//! Chat-completion client with retry, plus a record/replay store for offline runs.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    #[serde(rename = "model")]
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    /// Stable key for the replay store: SHA-256 over the request as JSON
    /// with object keys sorted.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }
}

/// Compact JSON with object keys in sorted order at every level.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> =
                keys.into_iter().map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k]))).collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub content: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    #[serde(default)]
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub api_key_env_name: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint_url: "http://localhost:8080/v1/chat/completions".into(),
            api_key_env_name: DEFAULT_API_KEY_ENV.into(),
            timeout_ms: 120_000,
            max_retries: 3,
            retry_backoff_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("rate limited after {retries} retries")]
    RateLimited { retries: u32 },
    #[error("request timed out after {retries} retries")]
    Timeout { retries: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("endpoint answered HTTP {status}")]
    HttpStatus { status: u16, retries: u32 },
    #[error("no replay fixture for request {0}")]
    FixtureMissing(String),
    #[error("cannot write fixture store: {0}")]
    StoreUnwritable(String),
    #[error("invalid gateway configuration: {0}")]
    InvalidConfig(String),
}

/// Anything that can answer a completion request.
pub trait ChatClient {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

/// Outcome of a single HTTP exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Unreachable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. Split out so retry logic tests without a network.
pub trait Transport {
    fn post_json(&self, url: &str, api_key: &str, body: &str, timeout: Duration) -> Result<HttpReply, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Self {
        ReqwestTransport { client: reqwest::blocking::Client::new() }
    }
}

impl Default for ReqwestTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for ReqwestTransport {
    fn post_json(&self, url: &str, api_key: &str, body: &str, timeout: Duration) -> Result<HttpReply, TransportError> {
        let resp = self
            .client
            .post(url)
            .timeout(timeout)
            .bearer_auth(api_key)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout
                } else {
                    TransportError::Unreachable(e.without_url().to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Unreachable(e.without_url().to_string())
            }
        })?;
        Ok(HttpReply { status, body })
    }
}

pub type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

/// Live client for an OpenAI-style chat-completion endpoint.
pub struct HttpClient<T: Transport = ReqwestTransport> {
    cfg: GatewayConfig,
    transport: T,
    sleep: Sleeper,
}

impl fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpClient").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl HttpClient<ReqwestTransport> {
    pub fn new(cfg: GatewayConfig) -> Self {
        Self::with_transport(cfg, ReqwestTransport::new())
    }
}

impl<T: Transport> HttpClient<T> {
    pub fn with_transport(cfg: GatewayConfig, transport: T) -> Self {
        HttpClient { cfg, transport, sleep: Box::new(std::thread::sleep) }
    }

    pub fn with_sleeper(mut self, sleep: Sleeper) -> Self {
        self.sleep = sleep;
        self
    }

    fn api_key(&self) -> Result<String, GatewayError> {
        match std::env::var(&self.cfg.api_key_env_name) {
            Ok(k) if !k.is_empty() => Ok(k),
            _ => Err(GatewayError::Unauthorized(format!(
                "environment variable {} is not set",
                self.cfg.api_key_env_name
            ))),
        }
    }
}

/// Reads `choices[0].message.content` and `choices[0].finish_reason`.
pub fn parse_completion_body(body: &str) -> Result<(String, FinishReason), GatewayError> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::MalformedResponse("no choices[0]".into()))?;
    let content = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::MalformedResponse("no choices[0].message.content".into()))?;
    let finish = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    Ok((content.to_string(), finish))
}

impl<T: Transport> ChatClient for HttpClient<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        if self.cfg.timeout_ms == 0 {
            return Err(GatewayError::InvalidConfig("timeout_ms must be positive".into()));
        }
        let key = self.api_key()?;
        let body = serde_json::to_string(req).expect("request serializes");
        let timeout = Duration::from_millis(self.cfg.timeout_ms);
        let started = Instant::now();
        let mut retries = 0u32;
        loop {
            let transient = match self.transport.post_json(&self.cfg.endpoint_url, &key, &body, timeout) {
                Ok(HttpReply { status: 200..=299, body }) => {
                    let (content, finish_reason) = parse_completion_body(&body)?;
                    let latency_ms = started.elapsed().as_millis() as u64;
                    debug!(retries, latency_ms, "completion received");
                    return Ok(CompletionResult { content, finish_reason, latency_ms, retries });
                }
                Ok(HttpReply { status: 401 | 403, .. }) => {
                    return Err(GatewayError::Unauthorized("endpoint rejected the API key".into()))
                }
                Ok(HttpReply { status: 429, .. }) => GatewayError::RateLimited { retries },
                Ok(HttpReply { status, .. }) if status >= 500 => GatewayError::HttpStatus { status, retries },
                Ok(HttpReply { status, .. }) => return Err(GatewayError::HttpStatus { status, retries }),
                Err(TransportError::Timeout) => GatewayError::Timeout { retries },
                Err(TransportError::Unreachable(msg)) => return Err(GatewayError::EndpointUnreachable(msg)),
            };
            if retries >= self.cfg.max_retries {
                return Err(transient);
            }
            let backoff = self.cfg.retry_backoff_ms.saturating_mul(1u64 << retries.min(20));
            warn!(attempt = retries + 1, backoff_ms = backoff, error = %transient, "transient gateway failure, retrying");
            (self.sleep)(Duration::from_millis(backoff));
            retries += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub request: CompletionRequest,
    pub response: CompletionResult,
}

/// Path of the fixture for `req` inside `store`.
pub fn fixture_path(store: &Path, req: &CompletionRequest) -> PathBuf {
    store.join(format!("{}.json", req.hash()))
}

/// Writes a fixture atomically. An existing file for the same hash is kept.
pub fn write_fixture(store: &Path, fixture: &Fixture) -> Result<PathBuf, GatewayError> {
    let unwritable = |e: &dyn fmt::Display| GatewayError::StoreUnwritable(format!("{}: {e}", store.display()));
    fs::create_dir_all(store).map_err(|e| unwritable(&e))?;
    let path = fixture_path(store, &fixture.request);
    let mut stored = fixture.clone();
    stored.response.latency_ms = 0;
    stored.response.retries = 0;
    let mut text = serde_json::to_string_pretty(&stored).expect("fixture serializes");
    text.push('\n');
    let mut tmp = tempfile::NamedTempFile::new_in(store).map_err(|e| unwritable(&e))?;
    tmp.write_all(text.as_bytes()).map_err(|e| unwritable(&e))?;
    match tmp.persist_noclobber(&path) {
        Ok(_) => {}
        Err(e) if path.exists() => debug!(path = %path.display(), error = %e.error, "fixture already recorded"),
        Err(e) => return Err(unwritable(&e.error)),
    }
    Ok(path)
}

/// Wraps a live client with a fixture store. In replay mode the inner
/// client is never consulted.
pub struct RecordReplayClient {
    mode: ReplayMode,
    store: PathBuf,
    inner: Option<Box<dyn ChatClient>>,
}

impl RecordReplayClient {
    pub fn new(mode: ReplayMode, store: impl Into<PathBuf>, inner: Option<Box<dyn ChatClient>>) -> Self {
        RecordReplayClient { mode, store: store.into(), inner }
    }

    pub fn replay(store: impl Into<PathBuf>) -> Self {
        Self::new(ReplayMode::Replay, store, None)
    }

    fn live(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        match &self.inner {
            Some(c) => c.complete(req),
            None => Err(GatewayError::InvalidConfig("no live client configured".into())),
        }
    }
}

impl ChatClient for RecordReplayClient {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        match self.mode {
            ReplayMode::Live => self.live(req),
            ReplayMode::Record => {
                let res = self.live(req)?;
                let path = write_fixture(&self.store, &Fixture { request: req.clone(), response: res.clone() })?;
                debug!(path = %path.display(), "recorded fixture");
                Ok(res)
            }
            ReplayMode::Replay => {
                let hash = req.hash();
                let path = self.store.join(format!("{hash}.json"));
                let text = fs::read_to_string(&path).map_err(|_| GatewayError::FixtureMissing(hash.clone()))?;
                let fx: Fixture = serde_json::from_str(&text)
                    .map_err(|e| GatewayError::MalformedResponse(format!("fixture {hash}: {e}")))?;
                Ok(fx.response)
            }
        }
    }
}
