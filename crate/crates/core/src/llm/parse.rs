use serde_json::{Map, Value};

use super::{Answer, Verdict};

pub const NO_EXPLANATION: &str = "(none provided)";

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParseErrorKind {
    NoJsonObject,
    MissingField(String),
    InvalidAnswer(String),
    InvalidProbability(String),
    EmptyExplanation,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::NoJsonObject => write!(f, "no JSON object found"),
            ParseErrorKind::MissingField(name) => write!(f, "missing field {name:?}"),
            ParseErrorKind::InvalidAnswer(a) => write!(f, "answer {a:?} is not YES or NO"),
            ParseErrorKind::InvalidProbability(p) => {
                write!(f, "probability {p} is not a number in [0, 1]")
            }
            ParseErrorKind::EmptyExplanation => write!(f, "explanation is empty"),
        }
    }
}

/// A response that could not be turned into a verdict. Carries the raw text
/// for the audit log.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("unparseable response: {kind}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub raw: String,
}

/// Byte range of the balanced `{ ... }` starting at `start`, honoring JSON
/// string quoting.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced substring that parses as a JSON object. Leading reasoning
/// text, code fences and trailing chatter are skipped.
pub fn find_json_object(raw: &str) -> Option<Map<String, Value>> {
    let bytes = raw.as_bytes();
    let mut from = 0;
    while let Some(offset) = raw[from..].find('{') {
        let start = from + offset;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&raw[start..end]) {
                return Some(obj);
            }
        }
        from = start + 1;
    }
    None
}

fn probability_of(v: &Value) -> Result<f64, ParseErrorKind> {
    let p = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match p {
        Some(p) if p.is_finite() && (0.0..=1.0).contains(&p) => Ok(p),
        _ => Err(ParseErrorKind::InvalidProbability(v.to_string())),
    }
}

pub(crate) fn verdict_from_object(
    obj: &Map<String, Value>,
    backend_id: &str,
    record_id: &str,
    raw: &str,
    explanation_required: bool,
) -> Result<Verdict, ParseErrorKind> {
    let field = |name: &str| obj.get(name).filter(|v| !v.is_null());
    let answer_v = field("answer").ok_or_else(|| ParseErrorKind::MissingField("answer".into()))?;
    let prob_v =
        field("probability").ok_or_else(|| ParseErrorKind::MissingField("probability".into()))?;
    let answer = match answer_v {
        Value::String(s) => match s.trim().to_ascii_uppercase().as_str() {
            "YES" => Answer::Yes,
            "NO" => Answer::No,
            _ => return Err(ParseErrorKind::InvalidAnswer(s.clone())),
        },
        other => return Err(ParseErrorKind::InvalidAnswer(other.to_string())),
    };
    let probability = probability_of(prob_v)?;
    let explanation = match field("explanation") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(Value::String(_)) if explanation_required => {
            return Err(ParseErrorKind::EmptyExplanation)
        }
        None if explanation_required => {
            return Err(ParseErrorKind::MissingField("explanation".into()))
        }
        Some(Value::String(_)) | None => NO_EXPLANATION.to_string(),
        Some(other) => other.to_string(),
    };
    Ok(Verdict {
        backend_id: backend_id.to_string(),
        record_id: record_id.to_string(),
        answer,
        probability,
        explanation,
        latency_ms: 0,
        prompt_version: String::new(),
        raw_response: raw.to_string(),
    })
}

/// Extracts `{answer, probability, explanation}` from a model response.
///
/// The answer is matched case-insensitively after trimming. Probabilities
/// outside [0, 1] are errors, never clamped.
pub fn parse_verdict(raw: &str, backend_id: &str, record_id: &str) -> Result<Verdict, ParseError> {
    let fail = |kind| ParseError {
        kind,
        raw: raw.to_string(),
    };
    let obj = find_json_object(raw).ok_or_else(|| fail(ParseErrorKind::NoJsonObject))?;
    verdict_from_object(&obj, backend_id, record_id, raw, true).map_err(fail)
}
