use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::Prompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiStyle {
    /// OpenAI-compatible `POST .../chat/completions`.
    #[default]
    ChatCompletions,
    /// Plain completion endpoint: `{model, system, prompt}` in, `{response}` out.
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings {
            temperature: 0.0,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub backend_id: String,
    pub endpoint_url: String,
    pub model_name: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// Initial backoff; doubles per retry.
    pub backoff_ms: u64,
    pub api: ApiStyle,
    pub decode: DecodeSettings,
    /// Maximum in-flight requests for this backend.
    pub concurrency: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            backend_id: "llm".into(),
            endpoint_url: "http://127.0.0.1:11434/v1/chat/completions".into(),
            model_name: String::new(),
            timeout_s: 120.0,
            max_retries: 2,
            backoff_ms: 500,
            api: ApiStyle::ChatCompletions,
            decode: DecodeSettings::default(),
            concurrency: 1,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.backend_id.trim().is_empty() {
            return Err("backend_id must not be empty".into());
        }
        if !(self.timeout_s > 0.0) || !self.timeout_s.is_finite() {
            return Err(format!("{}: timeout_s must be > 0", self.backend_id));
        }
        if self.concurrency == 0 {
            return Err(format!("{}: concurrency must be >= 1", self.backend_id));
        }
        url::Url::parse(&self.endpoint_url)
            .map_err(|e| format!("{}: bad endpoint_url: {e}", self.backend_id))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out after {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("server returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<TransportError>,
    },
    #[error("response body was not the expected JSON: {0}")]
    BadResponse(String),
    #[error("http client error: {0}")]
    Client(String),
}

impl TransportError {
    fn retryable(&self) -> bool {
        match self {
            TransportError::Timeout { .. } | TransportError::Connect(_) => true,
            TransportError::Status { code, .. } => *code >= 500 || *code == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawResponse {
    pub text: String,
    /// Wall time of the successful attempt.
    pub latency: Duration,
    pub attempts: u32,
}

/// Blocking JSON-over-HTTP client with retry and exponential backoff.
#[derive(Debug, Clone)]
pub struct LlmClient {
    config: BackendConfig,
    http: reqwest::blocking::Client,
}

impl LlmClient {
    pub fn new(config: BackendConfig) -> Result<Self, TransportError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_s))
            .build()
            .map_err(|e| TransportError::Client(e.to_string()))?;
        Ok(LlmClient { config, http })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn attempt(&self, body: &Value) -> Result<Value, TransportError> {
        let resp = self
            .http
            .post(&self.config.endpoint_url)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportError::Timeout {
                        after_ms: (self.config.timeout_s * 1000.0) as u64,
                    }
                } else if e.is_connect() {
                    TransportError::Connect(e.to_string())
                } else {
                    TransportError::Client(e.to_string())
                }
            })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout {
                    after_ms: (self.config.timeout_s * 1000.0) as u64,
                }
            } else {
                TransportError::Client(e.to_string())
            }
        })?;
        if !status.is_success() {
            let mut body = text;
            body.truncate(512);
            return Err(TransportError::Status {
                code: status.as_u16(),
                body,
            });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::BadResponse(e.to_string()))
    }

    /// POSTs `body`, retrying transport failures and 5xx/429 responses up to
    /// `max_retries` times. Returns the decoded JSON, the successful attempt's
    /// latency, and the number of attempts made.
    pub fn post_json(&self, body: &Value) -> Result<(Value, Duration, u32), TransportError> {
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            match self.attempt(body) {
                Ok(v) => return Ok((v, started.elapsed(), attempt)),
                Err(e) if e.retryable() => {
                    if attempt >= max_attempts {
                        return Err(TransportError::RetriesExhausted {
                            attempts: attempt,
                            last: Box::new(e),
                        });
                    }
                    let backoff = self
                        .config
                        .backoff_ms
                        .saturating_mul(1 << (attempt - 1).min(16));
                    log::debug!(
                        "{}: attempt {attempt} failed ({e}); retrying in {backoff} ms",
                        self.config.backend_id
                    );
                    std::thread::sleep(Duration::from_millis(backoff));
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn request_body(&self, prompt: &Prompt) -> Value {
        let c = &self.config;
        match c.api {
            ApiStyle::ChatCompletions => {
                let mut messages = vec![json!({"role": "system", "content": prompt.system})];
                for (u, a) in &prompt.few_shot {
                    messages.push(json!({"role": "user", "content": u}));
                    messages.push(json!({"role": "assistant", "content": a}));
                }
                messages.push(json!({"role": "user", "content": prompt.user}));
                json!({
                    "model": c.model_name,
                    "messages": messages,
                    "temperature": c.decode.temperature,
                    "max_tokens": c.decode.max_tokens,
                    "stream": false,
                })
            }
            ApiStyle::Generate => json!({
                "model": c.model_name,
                "system": prompt.system,
                "prompt": prompt.as_single_text(),
                "stream": false,
                "options": {"temperature": c.decode.temperature, "num_predict": c.decode.max_tokens},
            }),
        }
    }

    fn extract_text(&self, v: &Value) -> Result<String, TransportError> {
        let text = match self.config.api {
            ApiStyle::ChatCompletions => v.pointer("/choices/0/message/content"),
            ApiStyle::Generate => v.get("response"),
        };
        text.and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                TransportError::BadResponse(format!("no completion text in {}", truncate(v)))
            })
    }

    /// Sends one prompt and returns the model's raw completion text.
    pub fn classify_remote(&self, prompt: &Prompt) -> Result<RawResponse, TransportError> {
        let (v, latency, attempts) = self.post_json(&self.request_body(prompt))?;
        Ok(RawResponse {
            text: self.extract_text(&v)?,
            latency,
            attempts,
        })
    }
}

fn truncate(v: &Value) -> String {
    let mut s = v.to_string();
    if s.len() > 200 {
        let mut cut = 200;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
    }
    s
}
