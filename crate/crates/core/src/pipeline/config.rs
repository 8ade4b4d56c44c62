use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::backend::{Classifier, LlmBackend, LogRegBackend, RemoteBackend};
use crate::corpus::{ingest_path, ColumnMapping, Ingested, RejectedRow};
use crate::ensemble::EnsemblePolicy;
use crate::kwfilter::{IndicatorRuleSet, IndicatorRules};
use crate::llm::{AuditLog, BackendConfig, PromptRegistry};
use crate::logreg::LogRegModel;
use crate::stfilter::ThresholdConfig;
use crate::textfeat::{Vectorizer, Vocabulary};

/// Environment variable that overrides `service.auth_token`.
pub const AUTH_TOKEN_ENV: &str = "CRASHQC_AUTH_TOKEN";
pub const DEFAULT_BIND: &str = "127.0.0.1:8750";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub paths: Vec<PathBuf>,
    /// Column mapping file; defaults to the standard column names.
    #[serde(default)]
    pub mapping: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSettings {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Logreg {
        backend_id: String,
        model: PathBuf,
        vocabulary: PathBuf,
        #[serde(default)]
        bigrams: bool,
    },
    Llm {
        #[serde(flatten)]
        client: BackendConfig,
        #[serde(default)]
        prompt_version: Option<String>,
        /// Extra prompt templates (`*.toml`) on top of the shipped ones.
        #[serde(default)]
        prompt_dir: Option<PathBuf>,
        /// JSON-lines log of every call and its parse outcome.
        #[serde(default)]
        audit_log: Option<PathBuf>,
    },
    Remote {
        #[serde(flatten)]
        client: BackendConfig,
    },
}

impl BackendSpec {
    pub fn backend_id(&self) -> &str {
        match self {
            BackendSpec::Logreg { backend_id, .. } => backend_id,
            BackendSpec::Llm { client, .. } | BackendSpec::Remote { client } => &client.backend_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSettings {
    /// At most this many unprocessed records per run, oldest first.
    pub batch_size: Option<usize>,
    /// Only records that occurred at or after this instant.
    pub since: Option<NaiveDateTime>,
    /// Re-decide records already processed under the current identity.
    pub reprocess: bool,
    /// Records classified between journal checkpoints.
    pub chunk_size: usize,
}

impl Default for BatchSettings {
    fn default() -> Self {
        BatchSettings {
            batch_size: None,
            since: None,
            reprocess: false,
            chunk_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSettings {
    pub bind: String,
    pub auth_token: Option<String>,
    /// Built review UI to serve at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceSettings {
    fn default() -> Self {
        ServiceSettings {
            bind: DEFAULT_BIND.into(),
            auth_token: None,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus: CorpusSettings,
    pub store: StoreSettings,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub indicators: IndicatorRules,
    pub backends: Vec<BackendSpec>,
    pub ensemble: EnsemblePolicy,
    #[serde(default)]
    pub batch: BatchSettings,
    #[serde(default)]
    pub service: ServiceSettings,
}

impl PipelineConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(s: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    /// Loads, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::from_toml_str(&text, base)?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(token) = std::env::var(AUTH_TOKEN_ENV) {
            if !token.is_empty() {
                self.service.auth_token = Some(token);
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.corpus.paths.iter_mut().for_each(fix);
        if let Some(p) = self.corpus.mapping.as_mut() {
            fix(p);
        }
        fix(&mut self.store.dir);
        if let Some(p) = self.service.static_dir.as_mut() {
            fix(p);
        }
        for b in &mut self.backends {
            match b {
                BackendSpec::Logreg {
                    model, vocabulary, ..
                } => {
                    fix(model);
                    fix(vocabulary);
                }
                BackendSpec::Llm {
                    prompt_dir,
                    audit_log,
                    ..
                } => {
                    prompt_dir
                        .iter_mut()
                        .chain(audit_log.iter_mut())
                        .for_each(fix);
                }
                BackendSpec::Remote { .. } => {}
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let must_exist = |p: &Path, what: &str| {
            if p.exists() {
                Ok(())
            } else {
                Err(invalid(format!("{what} {} does not exist", p.display())))
            }
        };
        if self.corpus.paths.is_empty() {
            return Err(invalid("corpus.paths is empty"));
        }
        for p in &self.corpus.paths {
            must_exist(p, "corpus file")?;
        }
        if let Some(m) = &self.corpus.mapping {
            must_exist(m, "column mapping")?;
        }
        self.thresholds.validate().map_err(invalid)?;
        IndicatorRuleSet::compile(&self.indicators).map_err(|e| invalid(e.to_string()))?;
        if self.backends.is_empty() {
            return Err(invalid("at least one backend is required"));
        }
        let mut seen = HashSet::new();
        for b in &self.backends {
            if !seen.insert(b.backend_id()) {
                return Err(invalid(format!("duplicate backend_id {}", b.backend_id())));
            }
            match b {
                BackendSpec::Logreg {
                    backend_id,
                    model,
                    vocabulary,
                    ..
                } => {
                    if backend_id.trim().is_empty() {
                        return Err(invalid("backend_id must not be empty"));
                    }
                    must_exist(model, "model file")?;
                    must_exist(vocabulary, "vocabulary file")?;
                }
                BackendSpec::Llm {
                    client, prompt_dir, ..
                } => {
                    client.validate().map_err(invalid)?;
                    if let Some(d) = prompt_dir {
                        must_exist(d, "prompt directory")?;
                    }
                }
                BackendSpec::Remote { client } => client.validate().map_err(invalid)?,
            }
        }
        let ids: Vec<&str> = self.backends.iter().map(|b| b.backend_id()).collect();
        self.ensemble
            .validate(&ids)
            .map_err(|e| invalid(e.to_string()))?;
        if self.batch.chunk_size == 0 {
            return Err(invalid("batch.chunk_size must be >= 1"));
        }
        Ok(())
    }

    pub fn column_mapping(&self) -> Result<ColumnMapping, ConfigError> {
        match &self.corpus.mapping {
            Some(p) => ColumnMapping::load(p).map_err(|e| invalid(e.to_string())),
            None => Ok(ColumnMapping::default()),
        }
    }

    /// Ingests every corpus file; a record id seen in an earlier file wins.
    pub fn load_corpus(&self) -> Result<Ingested, ConfigError> {
        let mapping = self.column_mapping()?;
        let mut all: Option<Ingested> = None;
        for path in &self.corpus.paths {
            let part = ingest_path(path, &mapping)
                .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            all = Some(match all {
                None => part,
                Some(acc) => merge(acc, part),
            });
        }
        all.ok_or_else(|| invalid("corpus.paths is empty"))
    }

    pub fn indicator_rules(&self) -> Result<IndicatorRuleSet, ConfigError> {
        IndicatorRuleSet::compile(&self.indicators).map_err(|e| invalid(e.to_string()))
    }

    pub fn build_roster(&self) -> Result<Vec<Box<dyn Classifier>>, ConfigError> {
        self.backends.iter().map(build_backend).collect()
    }
}

fn merge(mut acc: Ingested, part: Ingested) -> Ingested {
    let known: HashSet<String> = acc.records.iter().map(|r| r.record_id.clone()).collect();
    let mut dropped = HashSet::new();
    for r in part.records {
        if known.contains(&r.record_id) {
            acc.report.rejected.push(RejectedRow {
                row: 0,
                record_id: Some(r.record_id.clone()),
                reason: "duplicate record_id".into(),
            });
            dropped.insert(r.record_id);
        } else {
            if !r.is_filterable() {
                acc.report.unfilterable.push(r.record_id.clone());
            }
            acc.report.accepted += 1;
            acc.records.push(r);
        }
    }
    for l in part.labels {
        if !dropped.contains(&l.record_id) {
            acc.report.labeled += 1;
            acc.report.labeled_positive += l.is_secondary as usize;
            acc.labels.push(l);
        }
    }
    acc.report.rows_read += part.report.rows_read;
    acc.report.rejected.extend(part.report.rejected);
    acc
}

pub fn build_backend(spec: &BackendSpec) -> Result<Box<dyn Classifier>, ConfigError> {
    Ok(match spec {
        BackendSpec::Logreg {
            backend_id,
            model,
            vocabulary,
            bigrams,
        } => {
            let model = LogRegModel::load(model).map_err(|e| invalid(e.to_string()))?;
            let vocab = Vocabulary::load(vocabulary).map_err(|e| invalid(e.to_string()))?;
            let vectorizer = Vectorizer {
                vocab,
                bigrams: *bigrams,
            };
            Box::new(
                LogRegBackend::new(backend_id.clone(), model, vectorizer)
                    .map_err(|e| invalid(e.to_string()))?,
            )
        }
        BackendSpec::Llm {
            client,
            prompt_version,
            prompt_dir,
            audit_log,
        } => {
            let registry = match prompt_dir {
                Some(d) => PromptRegistry::with_dir(d).map_err(|e| invalid(e.to_string()))?,
                None => PromptRegistry::default(),
            };
            let template = match prompt_version {
                Some(v) => registry.get(v).map_err(|e| invalid(e.to_string()))?.clone(),
                None => registry.default_template().clone(),
            };
            let mut backend =
                LlmBackend::new(client.clone(), template).map_err(|e| invalid(e.to_string()))?;
            if let Some(path) = audit_log {
                let log = AuditLog::open(path)
                    .map_err(|e| invalid(format!("audit log {}: {e}", path.display())))?;
                backend = backend.with_audit_log(Arc::new(log));
            }
            Box::new(backend)
        }
        BackendSpec::Remote { client } => {
            Box::new(RemoteBackend::new(client.clone()).map_err(|e| invalid(e.to_string()))?)
        }
    })
}
