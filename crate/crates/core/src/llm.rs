//! Chat-completion backends: an OpenAI-compatible HTTP client, a scripted
//! mock keyed by prompt digest, and a caching front end shared by workers.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("no scripted response for prompt digest {digest}")]
    UnscriptedPrompt { digest: String },
    #[error("invalid LLM configuration: {0}")]
    Config(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("mock script: {0}")]
    Script(String),
}

/// SHA-256 over the system text, a NUL separator, and the user text.
pub fn prompt_digest(system: &str, user: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(system.as_bytes());
    hasher.update([0u8]);
    hasher.update(user.as_bytes());
    hex::encode(hasher.finalize())
}

pub fn text_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// Base URL; requests go to `<endpoint>/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub temperature: f64,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 3,
            temperature: 0.0,
            backoff_ms: 500,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.timeout_secs == 0 {
            return Err(LlmError::Config("timeout_secs must be > 0".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Config(format!(
                "temperature must be within [0, 2], got {}",
                self.temperature
            )));
        }
        if self.model.is_empty() || self.endpoint.is_empty() {
            return Err(LlmError::Config("endpoint and model are required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<Completion, LlmError>;

    fn tag(&self) -> String;

    /// Deterministic backends get zeroed latency so transcripts are reproducible.
    fn deterministic(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// HTTP

pub struct HttpBackend {
    config: LlmConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl HttpBackend {
    pub fn new(config: LlmConfig) -> Result<HttpBackend, LlmError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn parse_body(body: &str) -> Result<Completion, LlmError> {
        let parsed: ChatResponse =
            serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::MalformedResponse("choices[0].message.content missing".into()))?;
        let usage = parsed.usage;
        Ok(Completion {
            text,
            prompt_tokens: usage.as_ref().and_then(|u| u.prompt_tokens),
            completion_tokens: usage.as_ref().and_then(|u| u.completion_tokens),
        })
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, system: &str, user: &str) -> Result<Completion, LlmError> {
        let key = std::env::var(&self.config.api_key_env)
            .map_err(|_| LlmError::MissingCredential(self.config.api_key_env.clone()))?;
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.config.temperature,
        });
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let sent = self.client.post(self.url()).bearer_auth(&key).json(&body).send();
            let response = match sent {
                Ok(r) => r,
                Err(e) => {
                    warn!(attempt, error = %e, "chat completion transport error");
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            let text = match response.text() {
                Ok(t) => t,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            if status.is_success() {
                return Self::parse_body(&text);
            }
            if status.as_u16() == 429 || status.is_server_error() {
                warn!(attempt, status = status.as_u16(), "retryable status");
                last_error = format!("HTTP {status}: {text}");
                continue;
            }
            return Err(LlmError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        Err(LlmError::Transport {
            attempts,
            message: last_error,
        })
    }

    fn tag(&self) -> String {
        format!("http:{}", self.config.model)
    }
}

// ---------------------------------------------------------------------------
// Scripted backends

/// Responses keyed by prompt digest, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default = "script_version")]
    pub version: u32,
    pub responses: BTreeMap<String, String>,
}

fn script_version() -> u32 {
    1
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            version: script_version(),
            responses: BTreeMap::new(),
        }
    }
}

impl MockScript {
    pub fn load(path: &Path) -> Result<MockScript, LlmError> {
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        let script: MockScript =
            serde_json::from_str(&text).map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        if script.version != script_version() {
            return Err(LlmError::Script(format!("{}: unsupported version {}", path.display(), script.version)));
        }
        Ok(script)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("script serializes");
        s.push('\n');
        s
    }
}

/// Exact-match replay. An unscripted prompt is an error, never a made-up answer.
pub struct MockBackend {
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        MockBackend { script }
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        MockBackend::new(MockScript {
            responses: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            ..MockScript::default()
        })
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, system: &str, user: &str) -> Result<Completion, LlmError> {
        let digest = prompt_digest(system, user);
        self.script
            .responses
            .get(&digest)
            .map(Completion::text)
            .ok_or(LlmError::UnscriptedPrompt { digest })
    }

    fn tag(&self) -> String {
        "mock".into()
    }

    fn deterministic(&self) -> bool {
        true
    }
}

type Responder = dyn Fn(&str, &str) -> String + Send + Sync;

/// Answers through a closure; handy for synthesising scripts in tests.
pub struct FnBackend {
    responder: Box<Responder>,
}

impl FnBackend {
    pub fn new(responder: impl Fn(&str, &str) -> String + Send + Sync + 'static) -> Self {
        FnBackend {
            responder: Box::new(responder),
        }
    }
}

impl LlmBackend for FnBackend {
    fn complete(&self, system: &str, user: &str) -> Result<Completion, LlmError> {
        Ok(Completion::text((self.responder)(system, user)))
    }

    fn tag(&self) -> String {
        "fn".into()
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Wraps a backend and keeps every answer so the run can be replayed by [`MockBackend`].
pub struct RecordingBackend {
    inner: Arc<dyn LlmBackend>,
    recorded: Mutex<BTreeMap<String, String>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn LlmBackend>) -> Self {
        RecordingBackend {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn script(&self) -> MockScript {
        MockScript {
            responses: self.recorded.lock().expect("recording lock").clone(),
            ..MockScript::default()
        }
    }
}

impl LlmBackend for RecordingBackend {
    fn complete(&self, system: &str, user: &str) -> Result<Completion, LlmError> {
        let completion = self.inner.complete(system, user)?;
        self.recorded
            .lock()
            .expect("recording lock")
            .insert(prompt_digest(system, user), completion.text.clone());
        Ok(completion)
    }

    fn tag(&self) -> String {
        format!("record:{}", self.inner.tag())
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }
}

// ---------------------------------------------------------------------------
// Client

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Tier1,
    Tier2,
    Tier3,
}

/// One prompt/response pair exactly as sent and received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmExchange {
    pub tier: Tier,
    pub digest: String,
    pub system: String,
    pub user: String,
    pub response: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
    pub backend: String,
    pub cached: bool,
}

struct Limiter {
    free: Mutex<usize>,
    cond: Condvar,
}

impl Limiter {
    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().expect("limiter lock");
        while *free == 0 {
            free = self.cond.wait(free).expect("limiter lock");
        }
        *free -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.free.lock().expect("limiter lock") += 1;
        self.limiter.cond.notify_one();
    }
}

/// Shared front end: response cache on (model, prompt digest) and an in-flight cap.
pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    model: String,
    cache: Mutex<HashMap<(String, String), Completion>>,
    limiter: Limiter,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn LlmBackend>, model: impl Into<String>, in_flight: usize) -> Self {
        LlmClient {
            backend,
            model: model.into(),
            cache: Mutex::new(HashMap::new()),
            limiter: Limiter {
                free: Mutex::new(in_flight.max(1)),
                cond: Condvar::new(),
            },
        }
    }

    pub fn deterministic(&self) -> bool {
        self.backend.deterministic()
    }

    pub fn exchange(&self, tier: Tier, system: &str, user: &str) -> Result<LlmExchange, LlmError> {
        if system.trim().is_empty() || user.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let digest = prompt_digest(system, user);
        let key = (self.model.clone(), digest.clone());
        let cached = self.cache.lock().expect("cache lock").get(&key).cloned();
        let (completion, latency_ms, cached) = match cached {
            Some(c) => (c, 0, true),
            None => {
                let started = Instant::now();
                let completion = {
                    let _permit = self.limiter.acquire();
                    self.backend.complete(system, user)?
                };
                let elapsed = started.elapsed().as_millis() as u64;
                self.cache.lock().expect("cache lock").insert(key, completion.clone());
                (completion, elapsed, false)
            }
        };
        debug!(?tier, digest = %digest, cached, "llm exchange");
        Ok(LlmExchange {
            tier,
            digest,
            system: system.to_string(),
            user: user.to_string(),
            response: completion.text,
            prompt_tokens: completion.prompt_tokens,
            completion_tokens: completion.completion_tokens,
            latency_ms: if self.backend.deterministic() { 0 } else { latency_ms },
            backend: self.backend.tag(),
            cached,
        })
    }
}
