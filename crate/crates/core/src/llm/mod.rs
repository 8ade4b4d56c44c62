//! Zero-shot LLM backend: prompt construction, an HTTP client for locally
//! hosted models, and a tolerant parser for the JSON verdict they return.

mod audit;
mod client;
pub(crate) mod parse;
mod prompt;

pub use audit::{AuditEntry, AuditLog};
pub use client::{ApiStyle, BackendConfig, DecodeSettings, LlmClient, RawResponse, TransportError};
pub use parse::{find_json_object, parse_verdict, ParseError, ParseErrorKind};
pub use prompt::{
    build_prompt, FewShotExample, Prompt, PromptError, PromptRegistry, PromptTemplate,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    #[serde(rename = "YES")]
    Yes,
    #[serde(rename = "NO")]
    No,
}

impl Answer {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == Answer::Yes
    }
}

impl std::fmt::Display for Answer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Answer::Yes => "YES",
            Answer::No => "NO",
        })
    }
}

/// One backend's classification of one narrative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub backend_id: String,
    pub record_id: String,
    pub answer: Answer,
    pub probability: f64,
    pub explanation: String,
    pub latency_ms: u64,
    pub prompt_version: String,
    pub raw_response: String,
}

/// Whole milliseconds, rounded up so any measured request is at least 1 ms.
pub fn duration_ms(d: std::time::Duration) -> u64 {
    d.as_micros().div_ceil(1000) as u64
}
