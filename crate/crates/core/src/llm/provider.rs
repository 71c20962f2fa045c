//! Model backends: an OpenAI-style chat-completions client, a replay
//! backend answering from a recorded transcript, and a recorder that wraps
//! another backend and writes the transcript.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::PromptBundle;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    ProviderUnreachable(String),
    #[error("provider timed out")]
    ProviderTimeout,
    #[error("provider quota exceeded")]
    QuotaExceeded,
    #[error("provider returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("replay transcript exhausted after {0} responses")]
    TranscriptExhausted(usize),
    #[error("request {index} does not match the transcript (expected digest {expected}, got {actual})")]
    RequestMismatch { index: usize, expected: String, actual: String },
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error("invalid transcript: {0}")]
    TranscriptFormat(String),
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        ChatMessage { role, content: content.into() }
    }
}

/// One earlier user turn and the model's reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub user: String,
    pub assistant: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub token_counts: Option<TokenCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub raw_text: String,
    pub provider_id: String,
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_counts: Option<TokenCounts>,
}

/// Settings recorded in report provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub provider_id: String,
    pub kind: ProviderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output_tokens: Option<u32>,
}

pub trait Provider: Send + Sync {
    fn info(&self) -> ProviderInfo;

    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, ProviderError>;

    fn id(&self) -> String {
        self.info().provider_id
    }
}

/// Sends `prompt` after the earlier turns in `history` and times the call.
pub fn request(
    provider: &dyn Provider,
    prompt: &PromptBundle,
    history: &[Exchange],
) -> Result<ModelResponse, ProviderError> {
    let mut messages = Vec::with_capacity(2 + 2 * history.len());
    messages.push(ChatMessage::new(Role::System, prompt.system_text.clone()));
    for ex in history {
        messages.push(ChatMessage::new(Role::User, ex.user.clone()));
        messages.push(ChatMessage::new(Role::Assistant, ex.assistant.clone()));
    }
    messages.push(ChatMessage::new(Role::User, prompt.user_text.clone()));
    let start = Instant::now();
    let completion = provider.complete(&messages)?;
    Ok(ModelResponse {
        raw_text: completion.text,
        provider_id: provider.id(),
        latency_s: start.elapsed().as_secs_f64(),
        token_counts: completion.token_counts,
    })
}

/// SHA-256 over the canonical JSON encoding of `messages`, hex encoded.
pub fn request_digest(messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(&canonical))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// Digest of the request this entry answers; empty or `*` matches any.
    #[serde(default)]
    pub request_digest: String,
    pub response_text: String,
    #[serde(default)]
    pub latency_s: f64,
}

impl TranscriptEntry {
    pub fn any(response_text: impl Into<String>) -> Self {
        TranscriptEntry { request_digest: "*".into(), response_text: response_text.into(), latency_s: 0.0 }
    }

    fn matches(&self, digest: &str) -> bool {
        self.request_digest.is_empty() || self.request_digest == "*" || self.request_digest == digest
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn from_json(bytes: &[u8]) -> Result<Self, ProviderError> {
        let t: Transcript = serde_json::from_slice(bytes).map_err(|e| ProviderError::TranscriptFormat(e.to_string()))?;
        for (i, e) in t.entries.iter().enumerate() {
            let digest_ok = e.request_digest.is_empty()
                || e.request_digest == "*"
                || (e.request_digest.len() == 64 && e.request_digest.bytes().all(|b| b.is_ascii_hexdigit()));
            if !digest_ok {
                return Err(ProviderError::TranscriptFormat(format!("entry {i}: request_digest is not a sha256 hex string")));
            }
            if !(e.latency_s.is_finite() && e.latency_s >= 0.0) {
                return Err(ProviderError::TranscriptFormat(format!("entry {i}: latency_s must be non-negative")));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let bytes = fs::read(path).map_err(|e| ProviderError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }
}

/// Answers requests in order from a transcript.
pub struct ReplayProvider {
    id: String,
    entries: Vec<TranscriptEntry>,
    cursor: Mutex<usize>,
    received: Mutex<Vec<Vec<ChatMessage>>>,
}

impl ReplayProvider {
    pub fn new(id: impl Into<String>, transcript: Transcript) -> Self {
        ReplayProvider {
            id: id.into(),
            entries: transcript.entries,
            cursor: Mutex::new(0),
            received: Mutex::new(Vec::new()),
        }
    }

    /// Replays bare response texts, accepting any request.
    pub fn from_responses<I, S>(id: impl Into<String>, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = responses.into_iter().map(TranscriptEntry::any).collect();
        Self::new(id, Transcript { entries })
    }

    /// Every request received so far, in order.
    pub fn received_requests(&self) -> Vec<Vec<ChatMessage>> {
        self.received.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - *self.cursor.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl Provider for ReplayProvider {
    fn info(&self) -> ProviderInfo {
        ProviderInfo {
            provider_id: self.id.clone(),
            kind: ProviderKind::Replay,
            model: None,
            temperature: None,
            max_output_tokens: None,
        }
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, ProviderError> {
        let mut cursor = self.cursor.lock().unwrap_or_else(|e| e.into_inner());
        self.received.lock().unwrap_or_else(|e| e.into_inner()).push(messages.to_vec());
        let entry = self.entries.get(*cursor).ok_or(ProviderError::TranscriptExhausted(self.entries.len()))?;
        let digest = request_digest(messages);
        if !entry.matches(&digest) {
            return Err(ProviderError::RequestMismatch {
                index: *cursor,
                expected: entry.request_digest.clone(),
                actual: digest,
            });
        }
        *cursor += 1;
        Ok(Completion { text: entry.response_text.clone(), token_counts: None })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    ChatCompletions,
    Replay,
    Record,
}

/// Provider configuration file (TOML).
///
/// ```toml
/// provider_id = "o1"
/// kind = "chat-completions"
/// base_url = "https://api.openai.com/v1"
/// model = "o1"
/// api_key_env = "OPENAI_API_KEY"
/// max_output_tokens = 4096
/// temperature = 0.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub provider_id: String,
    pub kind: ProviderKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_temperature")]
    pub temperature: Option<f64>,
    /// Transcript to replay from, or to record into.
    #[serde(default)]
    pub transcript: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_max_output_tokens() -> u32 {
    4096
}

fn default_temperature() -> Option<f64> {
    Some(0.0)
}

fn default_timeout() -> f64 {
    600.0
}

impl ProviderConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ProviderError> {
        let cfg: ProviderConfig = toml::from_str(text).map_err(|e| ProviderError::Config(e.message().to_string()))?;
        if cfg.provider_id.trim().is_empty() {
            return Err(ProviderError::Config("provider_id is empty".into()));
        }
        if !(cfg.timeout_s.is_finite() && cfg.timeout_s > 0.0) {
            return Err(ProviderError::Config("timeout_s must be positive".into()));
        }
        match cfg.kind {
            ProviderKind::ChatCompletions | ProviderKind::Record => {
                if cfg.base_url.is_none() || cfg.model.is_none() {
                    return Err(ProviderError::Config("chat-completions needs base_url and model".into()));
                }
            }
            ProviderKind::Replay => {}
        }
        if matches!(cfg.kind, ProviderKind::Replay | ProviderKind::Record) && cfg.transcript.is_none() {
            return Err(ProviderError::Config("replay and record providers need a transcript path".into()));
        }
        Ok(cfg)
    }

    /// Loads a config file; a relative transcript path resolves against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text =
            fs::read_to_string(path).map_err(|e| ProviderError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(t), Some(dir)) = (&cfg.transcript, path.parent()) {
            if t.is_relative() {
                cfg.transcript = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn build(&self) -> Result<Box<dyn Provider>, ProviderError> {
        match self.kind {
            ProviderKind::ChatCompletions => Ok(Box::new(HttpChatProvider::new(self.clone()))),
            ProviderKind::Replay => {
                let path = self.transcript.as_ref().expect("validated");
                Ok(Box::new(ReplayProvider::new(self.provider_id.clone(), Transcript::load(path)?)))
            }
            ProviderKind::Record => {
                let inner = HttpChatProvider::new(self.clone());
                let path = self.transcript.clone().expect("validated");
                Ok(Box::new(RecordingProvider::new(Box::new(inner), path)))
            }
        }
    }
}

/// Client for `POST {base_url}/chat/completions`.
pub struct HttpChatProvider {
    cfg: ProviderConfig,
    agent: ureq::Agent,
}

impl HttpChatProvider {
    pub fn new(cfg: ProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .build()
            .into();
        HttpChatProvider { cfg, agent }
    }

    fn endpoint(&self) -> String {
        let base = self.cfg.base_url.as_deref().unwrap_or_default().trim_end_matches('/');
        format!("{base}/chat/completions")
    }
}

fn map_ureq(e: ureq::Error) -> ProviderError {
    match e {
        ureq::Error::StatusCode(429) => ProviderError::QuotaExceeded,
        ureq::Error::StatusCode(status) => ProviderError::Http { status, body: String::new() },
        ureq::Error::Timeout(_) => ProviderError::ProviderTimeout,
        other => ProviderError::ProviderUnreachable(other.to_string()),
    }
}

impl Provider for HttpChatProvider {
    fn info(&self) -> ProviderInfo {
        ProviderInfo {
            provider_id: self.cfg.provider_id.clone(),
            kind: self.cfg.kind,
            model: self.cfg.model.clone(),
            temperature: self.cfg.temperature,
            max_output_tokens: Some(self.cfg.max_output_tokens),
        }
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, ProviderError> {
        let mut body = serde_json::json!({
            "model": self.cfg.model,
            "messages": messages,
            "max_tokens": self.cfg.max_output_tokens,
        });
        if let Some(t) = self.cfg.temperature {
            body["temperature"] = serde_json::json!(t);
        }
        let mut req = self.agent.post(&self.endpoint());
        if let Some(var) = &self.cfg.api_key_env {
            let key = std::env::var(var).map_err(|_| ProviderError::MissingApiKey(var.clone()))?;
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(map_ureq)?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(map_ureq)?;
        parse_chat_response(&value)
    }
}

fn parse_chat_response(value: &serde_json::Value) -> Result<Completion, ProviderError> {
    let text = value
        .pointer("/choices/0/message/content")
        .ok_or_else(|| ProviderError::MalformedResponse("missing choices[0].message.content".into()))?;
    let text = match text {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => return Err(ProviderError::MalformedResponse(format!("content is {other}"))),
    };
    let token_counts = value.get("usage").and_then(|u| {
        Some(TokenCounts { input: u.get("prompt_tokens")?.as_u64()?, output: u.get("completion_tokens")?.as_u64()? })
    });
    Ok(Completion { text, token_counts })
}

/// Forwards to another provider and appends every exchange to a transcript
/// file, rewriting the file after each response.
pub struct RecordingProvider {
    inner: Box<dyn Provider>,
    path: PathBuf,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl RecordingProvider {
    pub fn new(inner: Box<dyn Provider>, path: PathBuf) -> Self {
        RecordingProvider { inner, path, entries: Mutex::new(Vec::new()) }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript { entries: self.entries.lock().unwrap_or_else(|e| e.into_inner()).clone() }
    }
}

impl Provider for RecordingProvider {
    fn info(&self) -> ProviderInfo {
        ProviderInfo { kind: ProviderKind::Record, ..self.inner.info() }
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<Completion, ProviderError> {
        let start = Instant::now();
        let completion = self.inner.complete(messages)?;
        let entry = TranscriptEntry {
            request_digest: request_digest(messages),
            response_text: completion.text.clone(),
            latency_s: start.elapsed().as_secs_f64(),
        };
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        entries.push(entry);
        let json = serde_json::to_string_pretty(&*entries).expect("transcript serializes");
        fs::write(&self.path, json).map_err(|e| ProviderError::Io { path: self.path.clone(), message: e.to_string() })?;
        Ok(completion)
    }
}
