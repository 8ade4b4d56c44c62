//! Uniform classifier interface over the native logistic regression, prompted
//! LLMs, and external classifier services.
//!
//! The remote classifier wire format is `POST {record_id, narrative}` with a
//! JSON reply `{answer, probability, explanation?}`.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::corpus::CrashRecord;
use crate::llm::{
    self, build_prompt, duration_ms, parse_verdict, Answer, AuditEntry, AuditLog, BackendConfig,
    LlmClient, PromptTemplate, RawResponse, TransportError, Verdict,
};
use crate::logreg::LogRegModel;
use crate::textfeat::Vectorizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackendKind {
    NativeLogReg,
    PromptLLM,
    RemoteClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCategory {
    Transport,
    Parse,
    Model,
    Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{backend_id}: {category:?} error: {message}")]
pub struct BackendError {
    pub backend_id: String,
    pub category: ErrorCategory,
    pub message: String,
    /// Raw model output when the failure was a parse failure.
    pub raw_response: Option<String>,
}

impl BackendError {
    pub fn new(backend_id: &str, category: ErrorCategory, message: impl Into<String>) -> Self {
        BackendError {
            backend_id: backend_id.to_string(),
            category,
            message: message.into(),
            raw_response: None,
        }
    }

    fn transport(backend_id: &str, e: TransportError) -> Self {
        let category = match e {
            TransportError::BadResponse(_) => ErrorCategory::Model,
            TransportError::Status { code, .. } if (400..500).contains(&code) && code != 429 => {
                ErrorCategory::Config
            }
            TransportError::Client(_) => ErrorCategory::Config,
            _ => ErrorCategory::Transport,
        };
        BackendError::new(backend_id, category, e.to_string())
    }
}

/// A rostered classifier.
pub trait Classifier: Send + Sync {
    fn backend_id(&self) -> &str;
    fn kind(&self) -> BackendKind;
    /// Stable description of everything that changes this backend's output
    /// (model, prompt version); part of the batch identity.
    fn fingerprint(&self) -> String;
    /// Maximum concurrent requests.
    fn concurrency(&self) -> usize {
        1
    }
    fn classify(&self, record: &CrashRecord) -> Result<Verdict, BackendError>;
}

pub fn classify(backend: &dyn Classifier, record: &CrashRecord) -> Result<Verdict, BackendError> {
    backend.classify(record)
}

/// The TF-IDF logistic regression wrapped as a backend.
pub struct LogRegBackend {
    id: String,
    model: Arc<LogRegModel>,
    vectorizer: Arc<Vectorizer>,
    explain_terms: usize,
}

impl LogRegBackend {
    pub fn new(
        id: impl Into<String>,
        model: LogRegModel,
        vectorizer: Vectorizer,
    ) -> Result<Self, BackendError> {
        let id = id.into();
        model
            .check_vocabulary(&vectorizer.vocab)
            .map_err(|e| BackendError::new(&id, ErrorCategory::Config, e.to_string()))?;
        Ok(LogRegBackend {
            id,
            model: Arc::new(model),
            vectorizer: Arc::new(vectorizer),
            explain_terms: 3,
        })
    }

    pub fn model(&self) -> &LogRegModel {
        &self.model
    }

    pub fn vectorizer(&self) -> &Vectorizer {
        &self.vectorizer
    }
}

impl Classifier for LogRegBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::NativeLogReg
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in self
            .model
            .weights
            .iter()
            .chain([&self.model.bias, &self.model.decision_threshold])
        {
            h.update(w.to_bits().to_le_bytes());
        }
        format!(
            "logreg:{}:{}",
            self.model.vocab_version,
            hex::encode(&h.finalize()[..12])
        )
    }

    fn classify(&self, record: &CrashRecord) -> Result<Verdict, BackendError> {
        let started = Instant::now();
        let x = self.vectorizer.transform(&record.narrative);
        let p = self
            .model
            .predict_proba(&x)
            .map_err(|e| BackendError::new(&self.id, ErrorCategory::Model, e.to_string()))?;
        let answer = Answer::from_bool(p >= self.model.decision_threshold);
        // per-term contributions toward the chosen answer
        let mut contrib: Vec<(f64, &str)> = x
            .entries()
            .iter()
            .map(|&(i, v)| {
                (
                    self.model.weights[i] * v,
                    self.vectorizer.vocab.term(i).unwrap_or("?"),
                )
            })
            .filter(|(c, _)| if answer.is_yes() { *c > 0.0 } else { *c < 0.0 })
            .collect();
        contrib.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()).then_with(|| a.1.cmp(b.1)));
        let terms: Vec<String> = contrib
            .iter()
            .take(self.explain_terms)
            .map(|(c, t)| format!("{t} ({c:+.3})"))
            .collect();
        let explanation = if terms.is_empty() {
            format!("p={p:.3}; no contributing terms")
        } else {
            format!("p={p:.3}; top terms: {}", terms.join(", "))
        };
        Ok(Verdict {
            backend_id: self.id.clone(),
            record_id: record.record_id.clone(),
            answer,
            probability: p,
            explanation,
            latency_ms: duration_ms(started.elapsed()),
            prompt_version: String::new(),
            raw_response: String::new(),
        })
    }
}

/// A locally hosted LLM driven by a prompt template.
pub struct LlmBackend {
    client: LlmClient,
    template: PromptTemplate,
    audit: Option<Arc<AuditLog>>,
}

impl LlmBackend {
    pub fn new(config: BackendConfig, template: PromptTemplate) -> Result<Self, BackendError> {
        config
            .validate()
            .map_err(|e| BackendError::new(&config.backend_id, ErrorCategory::Config, e))?;
        let id = config.backend_id.clone();
        let client = LlmClient::new(config).map_err(|e| BackendError::transport(&id, e))?;
        Ok(LlmBackend {
            client,
            template,
            audit: None,
        })
    }

    /// Logs every call, successful or not, to `audit`.
    pub fn with_audit_log(mut self, audit: Arc<AuditLog>) -> Self {
        self.audit = Some(audit);
        self
    }

    fn audit(
        &self,
        record_id: &str,
        raw: Option<&RawResponse>,
        outcome: &Result<Verdict, BackendError>,
    ) {
        let Some(log) = &self.audit else { return };
        let entry = AuditEntry {
            backend_id: self.backend_id().to_string(),
            record_id: record_id.to_string(),
            prompt_version: self.template.version.clone(),
            raw_response: raw.map(|r| r.text.clone()),
            outcome: match outcome {
                Ok(_) => "ok".to_string(),
                Err(e) => format!("{:?}: {}", e.category, e.message),
            },
            latency_ms: raw.map(|r| duration_ms(r.latency)),
            at: chrono::Utc::now(),
        };
        if let Err(e) = log.append(&entry) {
            log::warn!("audit log {}: {e}", log.path().display());
        }
    }
}

impl Classifier for LlmBackend {
    fn backend_id(&self) -> &str {
        &self.client.config().backend_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::PromptLLM
    }

    fn fingerprint(&self) -> String {
        let c = self.client.config();
        format!(
            "llm:{}:{}:{:?}:{}",
            c.model_name, self.template.version, c.api, c.decode.temperature
        )
    }

    fn concurrency(&self) -> usize {
        self.client.config().concurrency
    }

    fn classify(&self, record: &CrashRecord) -> Result<Verdict, BackendError> {
        let id = self.backend_id();
        let prompt = build_prompt(&self.template, &record.narrative)
            .map_err(|e| BackendError::new(id, ErrorCategory::Model, e.to_string()))?;
        let raw = match self.client.classify_remote(&prompt) {
            Ok(raw) => raw,
            Err(e) => {
                let out = Err(BackendError::transport(id, e));
                self.audit(&record.record_id, None, &out);
                return out;
            }
        };
        let out = parse_verdict(&raw.text, id, &record.record_id)
            .map(|mut v| {
                v.latency_ms = duration_ms(raw.latency);
                v.prompt_version = prompt.version;
                v
            })
            .map_err(|e| BackendError {
                backend_id: id.to_string(),
                category: ErrorCategory::Parse,
                message: e.kind.to_string(),
                raw_response: Some(e.raw),
            });
        self.audit(&record.record_id, Some(&raw), &out);
        out
    }
}

/// Any external classifier speaking the `{record_id, narrative}` contract.
pub struct RemoteBackend {
    client: LlmClient,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config
            .validate()
            .map_err(|e| BackendError::new(&config.backend_id, ErrorCategory::Config, e))?;
        let id = config.backend_id.clone();
        let client = LlmClient::new(config).map_err(|e| BackendError::transport(&id, e))?;
        Ok(RemoteBackend { client })
    }
}

impl Classifier for RemoteBackend {
    fn backend_id(&self) -> &str {
        &self.client.config().backend_id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::RemoteClassifier
    }

    fn fingerprint(&self) -> String {
        // the endpoint is deployment detail, not model identity
        format!("remote:{}", self.client.config().model_name)
    }

    fn concurrency(&self) -> usize {
        self.client.config().concurrency
    }

    fn classify(&self, record: &CrashRecord) -> Result<Verdict, BackendError> {
        let id = self.backend_id();
        let body = json!({"record_id": record.record_id, "narrative": record.narrative});
        let (value, latency, _) = self
            .client
            .post_json(&body)
            .map_err(|e| BackendError::transport(id, e))?;
        let raw = value.to_string();
        let obj = value.as_object().ok_or_else(|| BackendError {
            backend_id: id.to_string(),
            category: ErrorCategory::Parse,
            message: "response is not a JSON object".into(),
            raw_response: Some(raw.clone()),
        })?;
        let mut v = llm::parse::verdict_from_object(obj, id, &record.record_id, &raw, false)
            .map_err(|kind| BackendError {
                backend_id: id.to_string(),
                category: ErrorCategory::Parse,
                message: kind.to_string(),
                raw_response: Some(raw.clone()),
            })?;
        v.latency_ms = duration_ms(latency);
        Ok(v)
    }
}
