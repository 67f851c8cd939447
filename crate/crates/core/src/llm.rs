//! Provider-agnostic chat-completion adapter with record/replay cassettes.
//!
//! This is the only module that performs network I/O.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::topic::Layer;

pub const PROMPT_VERSION: u32 = 1;

pub const ENV_MODE: &str = "DIKW_LLM_MODE";
pub const ENV_ENDPOINT: &str = "DIKW_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "DIKW_LLM_API_KEY";
pub const ENV_MODEL: &str = "DIKW_LLM_MODEL";
pub const ENV_RESPONSE_PATH: &str = "DIKW_LLM_RESPONSE_PATH";
pub const ENV_CASSETTES: &str = "DIKW_LLM_CASSETTES";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no recorded exchange for request {0}")]
    CassetteMiss(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("{layer} response does not match the expected output: {detail}")]
    SchemaViolation { layer: Layer, detail: String },
    #[error("llm configuration: {0}")]
    Config(String),
    #[error("cassette {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmMode {
    Live,
    Record,
    Replay,
    Canned,
}

impl FromStr for LlmMode {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(LlmMode::Live),
            "record" => Ok(LlmMode::Record),
            "replay" => Ok(LlmMode::Replay),
            "canned" => Ok(LlmMode::Canned),
            other => Err(LlmError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// A shipped per-layer system prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAsset {
    pub layer: Layer,
    pub text: String,
    pub version: u32,
}

impl PromptAsset {
    pub fn shipped(layer: Layer) -> Self {
        let text = match layer {
            Layer::Data => include_str!("../assets/prompts/data.txt"),
            Layer::Information => include_str!("../assets/prompts/information.txt"),
            Layer::Knowledge => include_str!("../assets/prompts/knowledge.txt"),
            Layer::Wisdom => include_str!("../assets/prompts/wisdom.txt"),
        };
        Self {
            layer,
            text: text.to_string(),
            version: PROMPT_VERSION,
        }
    }

    /// `<layer>@v<version>`, the form stored in requests.
    pub fn reference(&self) -> String {
        format!("{}@v{}", self.layer, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionParams {
    pub fn for_layer(layer: Layer) -> Self {
        let temperature = if layer == Layer::Wisdom { 0.7 } else { 0.0 };
        Self {
            temperature,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub layer: Layer,
    pub system_prompt_ref: String,
    pub user_content: String,
    /// Short headline the canned responder echoes (hypothesis or draft text).
    pub subject: String,
    pub params: CompletionParams,
}

impl LlmRequest {
    pub fn new(layer: Layer, user_content: impl Into<String>, subject: impl Into<String>) -> Self {
        Self {
            layer,
            system_prompt_ref: PromptAsset::shipped(layer).reference(),
            user_content: user_content.into(),
            subject: subject.into(),
            params: CompletionParams::for_layer(layer),
        }
    }

    /// Cassette id: digest of the canonical request.
    pub fn id(&self) -> String {
        canonical::digest_of(self).expect("request serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub finish_reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub id: String,
    pub request: LlmRequest,
    pub response: LlmResponse,
    pub recorded_at: DateTime<Utc>,
}

/// Where to send live requests and how to read the reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub endpoint: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    /// Dot path to the reply text, numeric segments index arrays.
    pub response_path: String,
    pub finish_reason_path: String,
}

impl ProviderProfile {
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            api_key: None,
            model: model.to_string(),
            response_path: "choices.0.message.content".to_string(),
            finish_reason_path: "choices.0.finish_reason".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub mode: LlmMode,
    #[serde(default)]
    pub cassette_dir: Option<PathBuf>,
    #[serde(default)]
    pub provider: Option<ProviderProfile>,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            mode: LlmMode::Canned,
            cassette_dir: None,
            provider: None,
            max_attempts: 3,
            backoff_ms: 500,
            timeout_secs: 60,
        }
    }
}

impl LlmConfig {
    pub fn canned() -> Self {
        Self::default()
    }

    /// Reads the mode, endpoint, key, model, response path and cassette
    /// directory from the environment. Unset mode means canned.
    pub fn from_env() -> Result<Self, LlmError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let mut cfg = Self::default();
        if let Some(m) = var(ENV_MODE) {
            cfg.mode = m.parse()?;
        }
        cfg.cassette_dir = var(ENV_CASSETTES).map(PathBuf::from);
        if let Some(endpoint) = var(ENV_ENDPOINT) {
            let mut p = ProviderProfile::new(&endpoint, &var(ENV_MODEL).unwrap_or_default());
            p.api_key = var(ENV_API_KEY);
            if let Some(path) = var(ENV_RESPONSE_PATH) {
                p.response_path = path;
            }
            cfg.provider = Some(p);
        }
        Ok(cfg)
    }
}

/// Text plus the ids of every exchange made to obtain it.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub json: Option<Value>,
    pub exchange_ids: Vec<String>,
}

#[derive(Debug)]
pub struct LlmAdapter {
    config: LlmConfig,
    clock: Option<DateTime<Utc>>,
    http: OnceLock<reqwest::blocking::Client>,
    write_lock: Mutex<()>,
}

impl LlmAdapter {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        match config.mode {
            LlmMode::Live | LlmMode::Record if config.provider.is_none() => {
                return Err(LlmError::Config(format!("{ENV_ENDPOINT} is not set")));
            }
            LlmMode::Record | LlmMode::Replay if config.cassette_dir.is_none() => {
                return Err(LlmError::Config("cassette directory is not set".into()));
            }
            _ => {}
        }
        Ok(Self {
            config,
            clock: None,
            http: OnceLock::new(),
            write_lock: Mutex::new(()),
        })
    }

    pub fn canned() -> Self {
        Self::new(LlmConfig::canned()).expect("canned config is valid")
    }

    /// Fixes the timestamp written into recorded exchanges.
    pub fn with_clock(mut self, at: DateTime<Utc>) -> Self {
        self.clock = Some(at);
        self
    }

    pub fn mode(&self) -> LlmMode {
        self.config.mode
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn cassette_path(&self, id: &str) -> Option<PathBuf> {
        self.config.cassette_dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }

    /// One raw exchange, no output validation.
    pub fn complete(&self, req: &LlmRequest) -> Result<Exchange, LlmError> {
        let id = req.id();
        let now = || self.clock.unwrap_or_else(Utc::now);
        match self.config.mode {
            LlmMode::Canned => Ok(Exchange {
                id,
                request: req.clone(),
                response: canned_response(req),
                recorded_at: self.clock.unwrap_or(DateTime::UNIX_EPOCH),
            }),
            LlmMode::Replay => {
                let path = self.cassette_path(&id).expect("checked in new");
                match fs::read(&path) {
                    Ok(bytes) => serde_json::from_slice(&bytes)
                        .map_err(|e| LlmError::Config(format!("{}: {e}", path.display()))),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(LlmError::CassetteMiss(id)),
                    Err(source) => Err(LlmError::Io { path, source }),
                }
            }
            LlmMode::Live => Ok(Exchange {
                id,
                request: req.clone(),
                response: self.call_with_retry(req)?,
                recorded_at: now(),
            }),
            LlmMode::Record => {
                let ex = Exchange {
                    id: id.clone(),
                    request: req.clone(),
                    response: self.call_with_retry(req)?,
                    recorded_at: now(),
                };
                let path = self.cassette_path(&id).expect("checked in new");
                let _guard = self.write_lock.lock().expect("cassette lock");
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|source| LlmError::Io { path: dir.to_path_buf(), source })?;
                }
                let mut bytes = canonical::to_canonical_bytes(&ex).expect("exchange serializes");
                bytes.push(b'\n');
                fs::write(&path, bytes).map_err(|source| LlmError::Io { path, source })?;
                Ok(ex)
            }
        }
    }

    /// Completes and checks the reply against the layer's output shape,
    /// reprompting once on mismatch.
    pub fn complete_validated(&self, req: &LlmRequest) -> Result<Completion, LlmError> {
        let first = self.complete(req)?;
        let mut ids = vec![first.id.clone()];
        let detail = match check_output(req.layer, &first.response.text) {
            Ok(json) => {
                return Ok(Completion {
                    text: first.response.text,
                    json,
                    exchange_ids: ids,
                })
            }
            Err(d) => d,
        };
        let mut retry = req.clone();
        retry.user_content = format!(
            "{}\n\nYour previous reply did not match the required output format ({detail}). {}",
            req.user_content,
            format_instruction(req.layer)
        );
        let second = self.complete(&retry)?;
        ids.push(second.id.clone());
        match check_output(req.layer, &second.response.text) {
            Ok(json) => Ok(Completion {
                text: second.response.text,
                json,
                exchange_ids: ids,
            }),
            Err(detail) => Err(LlmError::SchemaViolation { layer: req.layer, detail }),
        }
    }

    fn call_with_retry(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            match self.call_once(req) {
                Ok(r) => return Ok(r),
                Err(Retry::Fatal(e)) => return Err(LlmError::Transport(e)),
                Err(Retry::Again(e)) => {
                    tracing::warn!(attempt = i + 1, error = %e, "llm request failed");
                    last = e;
                    if i + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(self.config.backoff_ms << i));
                    }
                }
            }
        }
        Err(LlmError::Transport(format!("gave up after {attempts} attempts: {last}")))
    }

    fn call_once(&self, req: &LlmRequest) -> Result<LlmResponse, Retry> {
        let p = self.config.provider.as_ref().expect("checked in new");
        let client = self.http.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(self.config.timeout_secs))
                .build()
                .expect("http client builds")
        });
        let body = json!({
            "model": p.model,
            "messages": [
                {"role": "system", "content": PromptAsset::shipped(req.layer).text},
                {"role": "user", "content": req.user_content},
            ],
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
        });
        let mut rb = client.post(&p.endpoint).json(&body);
        if let Some(key) = &p.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| Retry::Again(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Retry::Again(format!("http {status}")));
        }
        if !status.is_success() {
            return Err(Retry::Fatal(format!("http {status}")));
        }
        let v: Value = resp.json().map_err(|e| Retry::Fatal(format!("invalid json: {e}")))?;
        let text = lookup(&v, &p.response_path)
            .and_then(Value::as_str)
            .ok_or_else(|| Retry::Fatal(format!("no string at `{}`", p.response_path)))?;
        let finish = lookup(&v, &p.finish_reason_path)
            .and_then(Value::as_str)
            .unwrap_or("unknown");
        Ok(LlmResponse {
            text: text.to_string(),
            finish_reason: finish.to_string(),
        })
    }
}

enum Retry {
    Again(String),
    Fatal(String),
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').filter(|s| !s.is_empty()).try_fold(v, |cur, seg| match seg.parse::<usize>() {
        Ok(i) => cur.get(i),
        Err(_) => cur.get(seg),
    })
}

fn format_instruction(layer: Layer) -> &'static str {
    match layer {
        Layer::Knowledge => {
            "Reply with only a JSON object {\"rationale\": string, \"generalizability\": string}."
        }
        Layer::Wisdom => "Reply with only a JSON object {\"text\": string, \"rationale\": string}.",
        Layer::Data | Layer::Information => "Reply with plain text.",
    }
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.strip_prefix("json").unwrap_or(rest);
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Checks a reply against the layer's expected output. Knowledge and wisdom
/// replies are JSON objects with a required non-empty string field.
pub fn check_output(layer: Layer, text: &str) -> Result<Option<Value>, String> {
    let required = match layer {
        Layer::Knowledge => "rationale",
        Layer::Wisdom => "text",
        Layer::Data | Layer::Information => {
            return if text.trim().is_empty() {
                Err("empty reply".into())
            } else {
                Ok(None)
            };
        }
    };
    let v: Value = serde_json::from_str(strip_fences(text)).map_err(|e| format!("not JSON: {e}"))?;
    match v.get(required).and_then(Value::as_str) {
        Some(s) if !s.trim().is_empty() => Ok(Some(v)),
        _ => Err(format!("missing non-empty string field `{required}`")),
    }
}

/// Fixed deterministic reply per layer.
pub fn canned_response(req: &LlmRequest) -> LlmResponse {
    let text = match req.layer {
        Layer::Knowledge => json!({
            "rationale": format!("Canned rationale for the hypothesis: {}", req.subject),
            "generalizability": "Canned: generalizability not assessed.",
        })
        .to_string(),
        Layer::Wisdom => json!({
            "text": req.subject,
            "rationale": "Canned: draft kept as assembled from the design rules.",
        })
        .to_string(),
        Layer::Data | Layer::Information => format!("Canned: {}", req.subject),
    };
    LlmResponse {
        text,
        finish_reason: "stop".to_string(),
    }
}

/// Loads every exchange in a cassette directory, keyed by id.
pub fn load_cassettes(dir: &Path) -> Result<HashMap<String, Exchange>, LlmError> {
    let mut out = HashMap::new();
    let entries = fs::read_dir(dir).map_err(|source| LlmError::Io { path: dir.to_path_buf(), source })?;
    for entry in entries {
        let path = entry.map_err(|source| LlmError::Io { path: dir.to_path_buf(), source })?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let bytes = fs::read(&path).map_err(|source| LlmError::Io { path: path.clone(), source })?;
            let ex: Exchange = serde_json::from_slice(&bytes)
                .map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
            out.insert(ex.id.clone(), ex);
        }
    }
    Ok(out)
}
