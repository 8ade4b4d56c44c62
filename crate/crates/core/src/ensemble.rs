//! Verdict aggregation across backends and the review-queue item types.
//!
//! Only answers matter for aggregation; probabilities are carried along for
//! display. Any backend error forces the record to human review.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::BackendError;
use crate::llm::{Answer, Verdict};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode")]
pub enum EnsemblePolicy {
    /// Auto-decide only when every verifier agrees with the primary.
    PrimaryWithVerifiers { primary_backend_id: String },
    /// Auto-decide when at least `quorum` backends give the same answer.
    Majority { quorum: usize },
    /// Auto-decide only when all backends agree.
    Unanimous,
}

impl EnsemblePolicy {
    /// Checks the policy against the rostered backend ids.
    pub fn validate(&self, roster: &[&str]) -> Result<(), EnsembleError> {
        match self {
            EnsemblePolicy::PrimaryWithVerifiers { primary_backend_id } => {
                if !roster.contains(&primary_backend_id.as_str()) {
                    return Err(EnsembleError::MissingBackend(primary_backend_id.clone()));
                }
            }
            EnsemblePolicy::Majority { quorum } => {
                if *quorum == 0 || *quorum > roster.len() {
                    return Err(EnsembleError::BadQuorum {
                        quorum: *quorum,
                        backends: roster.len(),
                    });
                }
            }
            EnsemblePolicy::Unanimous => {}
        }
        Ok(())
    }
}

/// One backend's contribution: a verdict or the error it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BackendResult {
    Verdict(Verdict),
    Error(BackendError),
}

impl BackendResult {
    pub fn backend_id(&self) -> &str {
        match self {
            BackendResult::Verdict(v) => &v.backend_id,
            BackendResult::Error(e) => &e.backend_id,
        }
    }

    pub fn answer(&self) -> Option<Answer> {
        match self {
            BackendResult::Verdict(v) => Some(v.answer),
            BackendResult::Error(_) => None,
        }
    }
}

impl From<Result<Verdict, BackendError>> for BackendResult {
    fn from(r: Result<Verdict, BackendError>) -> Self {
        match r {
            Ok(v) => BackendResult::Verdict(v),
            Err(e) => BackendResult::Error(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    AutoYes,
    AutoNo,
    Flagged,
}

impl Outcome {
    fn auto(answer: Answer) -> Self {
        match answer {
            Answer::Yes => Outcome::AutoYes,
            Answer::No => Outcome::AutoNo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub record_id: String,
    /// Sorted by backend id.
    pub verdicts: Vec<BackendResult>,
    pub outcome: Outcome,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnsembleError {
    #[error("no verdicts to aggregate")]
    NoVerdicts,
    #[error("policy references backend {0} which produced no verdict")]
    MissingBackend(String),
    #[error("quorum {quorum} is not within 1..={backends}")]
    BadQuorum { quorum: usize, backends: usize },
    #[error("verdicts belong to different records")]
    MixedRecords,
    #[error("backend {0} appears more than once")]
    DuplicateBackend(String),
}

fn names(ids: &[&str]) -> String {
    ids.join(", ")
}

/// Applies `policy` to one record's backend results. Pure; the order of
/// `results` never affects the outcome.
pub fn aggregate(
    results: &[BackendResult],
    policy: &EnsemblePolicy,
) -> Result<EnsembleDecision, EnsembleError> {
    let first = results.first().ok_or(EnsembleError::NoVerdicts)?;
    let record_id = match first {
        BackendResult::Verdict(v) => v.record_id.clone(),
        BackendResult::Error(_) => results
            .iter()
            .find_map(|r| match r {
                BackendResult::Verdict(v) => Some(v.record_id.clone()),
                _ => None,
            })
            .unwrap_or_default(),
    };
    if results
        .iter()
        .any(|r| matches!(r, BackendResult::Verdict(v) if v.record_id != record_id))
    {
        return Err(EnsembleError::MixedRecords);
    }
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| a.backend_id().cmp(b.backend_id()));
    if let Some(w) = sorted
        .windows(2)
        .find(|w| w[0].backend_id() == w[1].backend_id())
    {
        return Err(EnsembleError::DuplicateBackend(
            w[0].backend_id().to_string(),
        ));
    }
    let ids: Vec<&str> = sorted.iter().map(|r| r.backend_id()).collect();
    policy.validate(&ids)?;

    let errored: Vec<&str> = sorted
        .iter()
        .filter(|r| matches!(r, BackendResult::Error(_)))
        .map(|r| r.backend_id())
        .collect();

    let (outcome, reason) = if !errored.is_empty() {
        (
            Outcome::Flagged,
            format!("backend error from {}", names(&errored)),
        )
    } else {
        let answers: BTreeMap<&str, Answer> = sorted
            .iter()
            .filter_map(|r| r.answer().map(|a| (r.backend_id(), a)))
            .collect();
        decide(&answers, policy)
    };
    Ok(EnsembleDecision {
        record_id,
        verdicts: sorted,
        outcome,
        reason,
    })
}

fn decide(answers: &BTreeMap<&str, Answer>, policy: &EnsemblePolicy) -> (Outcome, String) {
    let yes: Vec<&str> = answers
        .iter()
        .filter(|(_, a)| a.is_yes())
        .map(|(id, _)| *id)
        .collect();
    let no: Vec<&str> = answers
        .iter()
        .filter(|(_, a)| !a.is_yes())
        .map(|(id, _)| *id)
        .collect();
    match policy {
        EnsemblePolicy::PrimaryWithVerifiers { primary_backend_id } => {
            let primary = answers[primary_backend_id.as_str()];
            let dissent: Vec<&str> = answers
                .iter()
                .filter(|(id, a)| **id != primary_backend_id.as_str() && **a != primary)
                .map(|(id, _)| *id)
                .collect();
            if dissent.is_empty() {
                (
                    Outcome::auto(primary),
                    format!("all verifiers agree with {primary_backend_id} ({primary})"),
                )
            } else {
                (
                    Outcome::Flagged,
                    format!(
                        "{primary_backend_id} answered {primary}; dissent from {}",
                        names(&dissent)
                    ),
                )
            }
        }
        EnsemblePolicy::Majority { quorum } => {
            let yes_ok = yes.len() >= *quorum;
            let no_ok = no.len() >= *quorum;
            match (yes_ok, no_ok) {
                (true, false) => (
                    Outcome::AutoYes,
                    format!("{}/{} YES meets quorum {quorum}", yes.len(), answers.len()),
                ),
                (false, true) => (
                    Outcome::AutoNo,
                    format!("{}/{} NO meets quorum {quorum}", no.len(), answers.len()),
                ),
                (true, true) => (
                    Outcome::Flagged,
                    format!(
                        "both answers reach quorum {quorum} (YES: {}; NO: {})",
                        names(&yes),
                        names(&no)
                    ),
                ),
                (false, false) => (
                    Outcome::Flagged,
                    format!(
                        "no answer reaches quorum {quorum} (YES: {}; NO: {})",
                        names(&yes),
                        names(&no)
                    ),
                ),
            }
        }
        EnsemblePolicy::Unanimous => {
            if no.is_empty() {
                (Outcome::AutoYes, "unanimous YES".into())
            } else if yes.is_empty() {
                (Outcome::AutoNo, "unanimous NO".into())
            } else {
                (
                    Outcome::Flagged,
                    format!("split: YES from {}; NO from {}", names(&yes), names(&no)),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReviewStatus {
    Pending,
    Resolved,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub is_secondary: bool,
    pub analyst: String,
    pub note: Option<String>,
    pub resolved_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub record_id: String,
    pub decision: EnsembleDecision,
    pub status: ReviewStatus,
    pub resolution: Option<Resolution>,
    pub enqueued_at: DateTime<Utc>,
}

/// Per-backend agreement with human resolutions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub agree: u64,
    pub disagree: u64,
    pub errored: u64,
}

impl AgreementStats {
    pub fn total(&self) -> u64 {
        self.agree + self.disagree + self.errored
    }
}

/// Adds one resolution to per-backend stats.
pub fn tally_resolution(
    stats: &mut BTreeMap<String, AgreementStats>,
    decision: &EnsembleDecision,
    is_secondary: bool,
) {
    for r in &decision.verdicts {
        let entry = stats.entry(r.backend_id().to_string()).or_default();
        match r.answer() {
            Some(a) if a.is_yes() == is_secondary => entry.agree += 1,
            Some(_) => entry.disagree += 1,
            None => entry.errored += 1,
        }
    }
}

/// (YES, NO, errored) counts, for the at-a-glance split in review listings.
pub fn answer_split(decision: &EnsembleDecision) -> (usize, usize, usize) {
    let mut yes = 0;
    let mut no = 0;
    let mut err = 0;
    for r in &decision.verdicts {
        match r.answer() {
            Some(Answer::Yes) => yes += 1,
            Some(Answer::No) => no += 1,
            None => err += 1,
        }
    }
    (yes, no, err)
}
