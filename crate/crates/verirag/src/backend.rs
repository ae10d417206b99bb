//! Text generation backends behind one trait: a chat-completions HTTP
//! client with retry and bounded concurrency, and a deterministic scripted
//! backend that makes every pipeline stage runnable without a network.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend refused request: status {status}, body {body:?}")]
    Refusal { status: u16, body: String },
    #[error("script has no entry matching prompt starting {prompt_prefix:?}")]
    ScriptMiss { prompt_prefix: String },
    #[error("script line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
}

/// One generation call: the prompt plus decoding bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

impl GenerationRequest {
    /// Greedy decoding with a generous completion budget.
    pub fn for_prompt(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 1024,
            temperature: 0.0,
            stop_sequences: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens < 1 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Anything that can complete a prompt. Implementations must tolerate
/// concurrent calls.
pub trait GenerationBackend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

/// Trim the completion at the first occurrence of any stop sequence.
fn apply_stop_sequences(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => text[..i].to_string(),
        None => text.to_string(),
    }
}

fn prompt_prefix(prompt: &str) -> String {
    prompt.chars().take(80).collect()
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// How a script entry decides whether it answers a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchRule {
    /// Hex SHA-256 of the entire prompt; checked before any substring entry.
    ExactPromptHash(String),
    /// Simple containment test against the prompt text.
    QuestionSubstring(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub rule: MatchRule,
    pub response: String,
}

/// Deterministic backend: a pure function of (script, prompt). Exact-hash
/// entries win over substring entries; substring entries match in file
/// order.
#[derive(Debug)]
pub struct ScriptedBackend {
    exact: HashMap<String, String>,
    substrings: Vec<(String, String)>,
}

/// Hex SHA-256 of a prompt, the key format for exact script entries.
pub fn hash_prompt(prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        let _ = write!(out, "{byte:02x}");
    }
    out
}

impl ScriptedBackend {
    /// Build from entries, rejecting duplicate exact hashes. `positions`
    /// in errors are 1-based entry indices (line numbers when loaded from
    /// a file).
    pub fn new(entries: Vec<(usize, ScriptEntry)>) -> Result<Self, BackendError> {
        let mut exact = HashMap::new();
        let mut substrings = Vec::new();
        for (position, entry) in entries {
            match entry.rule {
                MatchRule::ExactPromptHash(hash) => {
                    let hash = hash.to_ascii_lowercase();
                    if exact.insert(hash.clone(), entry.response).is_some() {
                        return Err(BackendError::Parse {
                            line: position,
                            message: format!("duplicate exact_prompt_hash entry {hash}"),
                        });
                    }
                }
                MatchRule::QuestionSubstring(needle) => {
                    substrings.push((needle, entry.response));
                }
            }
        }
        Ok(Self { exact, substrings })
    }

    pub fn builder() -> ScriptBuilder {
        ScriptBuilder::default()
    }
}

/// Fluent construction for fixtures: `exact` hashes the full prompt text
/// for you, `substring` adds containment entries in call order.
#[derive(Default)]
pub struct ScriptBuilder {
    entries: Vec<(usize, ScriptEntry)>,
}

impl ScriptBuilder {
    pub fn exact(mut self, prompt: &str, response: impl Into<String>) -> Self {
        let position = self.entries.len() + 1;
        self.entries.push((
            position,
            ScriptEntry {
                rule: MatchRule::ExactPromptHash(hash_prompt(prompt)),
                response: response.into(),
            },
        ));
        self
    }

    pub fn substring(mut self, needle: impl Into<String>, response: impl Into<String>) -> Self {
        let position = self.entries.len() + 1;
        self.entries.push((
            position,
            ScriptEntry {
                rule: MatchRule::QuestionSubstring(needle.into()),
                response: response.into(),
            },
        ));
        self
    }

    pub fn build(self) -> Result<ScriptedBackend, BackendError> {
        ScriptedBackend::new(self.entries)
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        if let Some(response) = self.exact.get(&hash_prompt(&request.prompt)) {
            return Ok(apply_stop_sequences(response, &request.stop_sequences));
        }
        for (needle, response) in &self.substrings {
            if request.prompt.contains(needle.as_str()) {
                return Ok(apply_stop_sequences(response, &request.stop_sequences));
            }
        }
        Err(BackendError::ScriptMiss {
            prompt_prefix: prompt_prefix(&request.prompt),
        })
    }
}

#[derive(Deserialize)]
struct RawScriptMatch {
    kind: String,
    value: String,
}

#[derive(Deserialize)]
struct RawScriptEntry {
    #[serde(rename = "match")]
    match_rule: RawScriptMatch,
    response: String,
}

/// Load a script file: one JSON record per line,
/// `{"match":{"kind":…,"value":…},"response":…}`; blank lines are skipped.
pub fn load_script(path: &Path) -> Result<ScriptedBackend, BackendError> {
    let text = std::fs::read_to_string(path).map_err(|e| BackendError::Parse {
        line: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawScriptEntry = serde_json::from_str(line).map_err(|e| BackendError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let rule = match raw.match_rule.kind.as_str() {
            "exact_prompt_hash" => MatchRule::ExactPromptHash(raw.match_rule.value),
            "question_substring" => MatchRule::QuestionSubstring(raw.match_rule.value),
            other => {
                return Err(BackendError::Parse {
                    line: line_no,
                    message: format!("unknown match kind {other:?}"),
                })
            }
        };
        entries.push((
            line_no,
            ScriptEntry {
                rule,
                response: raw.response,
            },
        ));
    }
    ScriptedBackend::new(entries)
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

/// Retry budget for transport-class failures. `attempts` is the total
/// number of tries; `backoff` supplies the sleep after each failed try
/// (the last entry repeats when the schedule is shorter than the budget).
#[derive(Debug, Clone, PartialEq)]
pub struct RetryConfig {
    pub attempts: u32,
    pub backoff: Vec<Duration>,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff: vec![Duration::from_millis(200), Duration::from_millis(800)],
        }
    }
}

impl RetryConfig {
    fn sleep_after(&self, failed_attempt: u32) -> Duration {
        if self.backoff.is_empty() {
            return Duration::ZERO;
        }
        let idx = (failed_attempt as usize - 1).min(self.backoff.len() - 1);
        self.backoff[idx]
    }
}

/// Connection details for a chat-completions endpoint. The API key is
/// named indirectly (environment variable) so configs stay shareable.
#[derive(Debug, Clone)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub timeout: Duration,
    pub retry: RetryConfig,
    /// Upper bound on concurrent in-flight requests.
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model_name: "default-model".into(),
            api_key_env: String::new(),
            timeout: Duration::from_secs(60),
            retry: RetryConfig::default(),
            max_in_flight: 4,
        }
    }
}

/// A raw HTTP exchange result, before any protocol interpretation.
#[derive(Debug, Clone)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

/// Network/timeout-class failure; always retryable.
#[derive(Debug, Clone)]
pub struct TransportFailure {
    pub message: String,
}

/// The one seam through which the engine may touch a network. Hermetic
/// runs install [`DenyingTransport`] here.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<TransportResponse, TransportFailure>;

    /// Plain GET used by live retrieval for search hits and page bodies.
    /// Bodies are truncated at `max_bytes`; redirects beyond `max_redirects`
    /// fail the request. Transports that only speak generation protocols
    /// keep this default.
    fn get_text(
        &self,
        url: &str,
        _timeout: Duration,
        _max_bytes: u64,
        _max_redirects: usize,
    ) -> Result<TransportResponse, TransportFailure> {
        Err(TransportFailure {
            message: format!("transport does not support GET (requested {url})"),
        })
    }
}

/// Production transport backed by a blocking HTTP client.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: format!("client construction failed: {e}"),
            })?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &serde_json::Value,
        _timeout: Duration,
    ) -> Result<TransportResponse, TransportFailure> {
        let mut request = self.client.post(url).json(body);
        if let Some(key) = api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| TransportFailure {
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportFailure {
            message: format!("reading body: {e}"),
        })?;
        Ok(TransportResponse { status, body })
    }

    fn get_text(
        &self,
        url: &str,
        timeout: Duration,
        max_bytes: u64,
        max_redirects: usize,
    ) -> Result<TransportResponse, TransportFailure> {
        use std::io::Read;
        // A dedicated client per call keeps the redirect cap a call-site
        // parameter; construction cost is noise next to the fetch itself.
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .redirect(reqwest::redirect::Policy::limited(max_redirects))
            .build()
            .map_err(|e| TransportFailure {
                message: format!("client construction failed: {e}"),
            })?;
        let response = client.get(url).send().map_err(|e| TransportFailure {
            message: e.to_string(),
        })?;
        let status = response.status().as_u16();
        let mut buf = Vec::new();
        response
            .take(max_bytes)
            .read_to_end(&mut buf)
            .map_err(|e| TransportFailure {
                message: format!("reading body: {e}"),
            })?;
        Ok(TransportResponse {
            status,
            body: String::from_utf8_lossy(&buf).into_owned(),
        })
    }
}

/// Transport that refuses every request and counts the refusals. Installed
/// in hermetic mode; a zero count after a run proves nothing tried to
/// reach a network.
#[derive(Default)]
pub struct DenyingTransport {
    attempts: AtomicUsize,
}

impl DenyingTransport {
    pub fn new() -> Self {
        Self::default()
    }

    /// How many network requests were attempted (and denied).
    pub fn attempt_count(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }
}

impl HttpTransport for DenyingTransport {
    fn post_json(
        &self,
        url: &str,
        _api_key: Option<&str>,
        _body: &serde_json::Value,
        _timeout: Duration,
    ) -> Result<TransportResponse, TransportFailure> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(TransportFailure {
            message: format!("hermetic mode denies network access (attempted POST {url})"),
        })
    }

    fn get_text(
        &self,
        url: &str,
        _timeout: Duration,
        _max_bytes: u64,
        _max_redirects: usize,
    ) -> Result<TransportResponse, TransportFailure> {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        Err(TransportFailure {
            message: format!("hermetic mode denies network access (attempted GET {url})"),
        })
    }
}

/// Counting semaphore bounding in-flight requests.
struct InFlightGate {
    capacity: usize,
    state: Mutex<usize>,
    signal: Condvar,
}

impl InFlightGate {
    fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new(0),
            signal: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut in_flight = self.state.lock().unwrap();
        while *in_flight >= self.capacity {
            in_flight = self.signal.wait(in_flight).unwrap();
        }
        *in_flight += 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.gate.state.lock().unwrap();
        *in_flight -= 1;
        self.gate.signal.notify_one();
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<String>,
}

#[derive(Deserialize)]
struct ChatResponseBody {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

/// Chat-completions client: bounded concurrency, transport retries with
/// backoff, refusals surfaced verbatim and never retried.
pub struct HttpBackend {
    config: BackendConfig,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
    gate: InFlightGate,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let transport = Arc::new(ReqwestTransport::new(config.timeout)?);
        Ok(Self::with_transport(config, transport))
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn HttpTransport>) -> Self {
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            std::env::var(&config.api_key_env).ok()
        };
        let gate = InFlightGate::new(config.max_in_flight);
        Self {
            config,
            api_key,
            transport,
            gate,
        }
    }

    fn call_once(&self, body: &serde_json::Value) -> Result<String, CallFailure> {
        let response = self
            .transport
            .post_json(
                &self.config.endpoint_url,
                self.api_key.as_deref(),
                body,
                self.config.timeout,
            )
            .map_err(|f| CallFailure::Retryable(f.message))?;
        if !(200..300).contains(&response.status) {
            return Err(CallFailure::Fatal(BackendError::Refusal {
                status: response.status,
                body: response.body,
            }));
        }
        // A 2xx body that does not parse is a broken frame: retryable.
        let parsed: ChatResponseBody = serde_json::from_str(&response.body)
            .map_err(|e| CallFailure::Retryable(format!("malformed completion body: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| CallFailure::Retryable("completion body has no choices".into()))
    }
}

enum CallFailure {
    Retryable(String),
    Fatal(BackendError),
}

impl GenerationBackend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let _permit = self.gate.acquire();
        let body = serde_json::to_value(ChatRequestBody {
            model: &self.config.model_name,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            stop: request.stop_sequences.clone(),
        })
        .expect("chat request body serializes");

        let attempts = self.config.retry.attempts.max(1);
        let mut last_message = String::new();
        for attempt in 1..=attempts {
            match self.call_once(&body) {
                Ok(content) => {
                    return Ok(apply_stop_sequences(&content, &request.stop_sequences));
                }
                Err(CallFailure::Fatal(e)) => return Err(e),
                Err(CallFailure::Retryable(message)) => {
                    last_message = message;
                    if attempt < attempts {
                        std::thread::sleep(self.config.retry.sleep_after(attempt));
                    }
                }
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last_message,
        })
    }
}
