//! Incremental batch runs over the corpus.
//!
//! A run selects records not yet processed under the current batch identity
//! (a hash of every rostered backend's fingerprint), filters them, classifies
//! the survivors in chunks and records one journal event per record. Verdicts
//! are journaled as they arrive, so a crashed run resumes without repeating
//! finished backend calls, and a record is only marked processed once its
//! outcome is final. Records whose backends were unreachable stay unprocessed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, BackendKind, Classifier, ErrorCategory};
use crate::corpus::CrashRecord;
use crate::ensemble::{
    aggregate, BackendResult, EnsembleError, EnsemblePolicy, Outcome, ReviewItem, ReviewStatus,
};
use crate::kwfilter::IndicatorRuleSet;
use crate::llm::Verdict;
use crate::stfilter::{pair_candidates, ThresholdConfig};
use crate::store::{RecordOutcome, Store, StoreError, StoreState};

use super::BatchSettings;

pub const LOCK_FILE: &str = "batch.lock";
pub const REASON_NO_PAIR: &str = "no spatiotemporal pair";
pub const REASON_NO_INDICATOR: &str = "no crash-reference indicator";

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("another batch holds {0}")]
    Locked(PathBuf),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("batch lock i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty backend roster")]
    NoBackends,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub backend_id: String,
    pub kind: BackendKind,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendStats {
    /// Fresh calls that returned a verdict.
    pub classified: usize,
    /// Verdicts reused from an interrupted run.
    pub reused: usize,
    pub yes: usize,
    pub no: usize,
    pub errors: usize,
}

/// Wall-clock facts; excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub wall_s: f64,
    /// Time each backend spent classifying, summed over chunks.
    pub backend_s: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub identity: String,
    pub roster: Vec<RosterEntry>,
    pub records_in: usize,
    /// Selected records without coordinates; they skip pairing.
    pub unfilterable: usize,
    /// Candidate pairs whose secondary is a selected record.
    pub pairs: usize,
    pub passed_stfilter: usize,
    pub passed_kwfilter: usize,
    pub auto_yes: usize,
    pub auto_no: usize,
    pub auto_decided: usize,
    pub flagged: usize,
    pub filtered_out: usize,
    pub errored: usize,
    pub filtered_reasons: BTreeMap<String, usize>,
    pub backends: BTreeMap<String, BackendStats>,
    pub timing: RunTiming,
}

impl BatchSummary {
    /// records_in = auto_decided + flagged + filtered_out + errored
    pub fn is_conserved(&self) -> bool {
        self.records_in == self.auto_decided + self.flagged + self.filtered_out + self.errored
            && self.auto_decided == self.auto_yes + self.auto_no
    }

    /// JSON with the timing block removed.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("summary serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("timing");
        }
        serde_json::to_string_pretty(&v).expect("summary serializes")
    }
}

impl std::fmt::Display for BatchSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "batch {}", &self.identity[..self.identity.len().min(12)])?;
        writeln!(f, "  records in         {}", self.records_in)?;
        writeln!(f, "  unfilterable       {}", self.unfilterable)?;
        writeln!(f, "  candidate pairs    {}", self.pairs)?;
        writeln!(f, "  passed stfilter    {}", self.passed_stfilter)?;
        writeln!(f, "  passed kwfilter    {}", self.passed_kwfilter)?;
        writeln!(
            f,
            "  auto-decided       {} (yes {}, no {})",
            self.auto_decided, self.auto_yes, self.auto_no
        )?;
        writeln!(f, "  flagged            {}", self.flagged)?;
        writeln!(f, "  filtered out       {}", self.filtered_out)?;
        for (reason, n) in &self.filtered_reasons {
            writeln!(f, "    {reason}: {n}")?;
        }
        writeln!(f, "  errored            {}", self.errored)?;
        for (id, s) in &self.backends {
            let secs = self.timing.backend_s.get(id).copied().unwrap_or(0.0);
            writeln!(
                f,
                "  {id}: {} classified, {} reused, {} errors, {secs:.2}s",
                s.classified, s.reused, s.errors
            )?;
        }
        write!(f, "  wall time          {:.2}s", self.timing.wall_s)
    }
}

/// Persistent batch progress for one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchState {
    pub identity: String,
    pub processed: BTreeSet<String>,
    pub last_run_at: Option<DateTime<Utc>>,
    pub runs: Vec<BatchSummary>,
}

pub fn batch_state(state: &StoreState, identity: &str) -> BatchState {
    let processed = state
        .processed(identity)
        .map(|m| m.keys().cloned().collect())
        .unwrap_or_default();
    let runs: Vec<BatchSummary> = state
        .runs()
        .iter()
        .filter(|r| r.identity == identity)
        .cloned()
        .collect();
    BatchState {
        identity: identity.to_string(),
        processed,
        last_run_at: runs.last().map(|r| r.timing.finished_at),
        runs,
    }
}

pub fn roster_entries(roster: &[Box<dyn Classifier>]) -> Vec<RosterEntry> {
    let mut entries: Vec<RosterEntry> = roster
        .iter()
        .map(|b| RosterEntry {
            backend_id: b.backend_id().to_string(),
            kind: b.kind(),
            fingerprint: b.fingerprint(),
        })
        .collect();
    entries.sort_by(|a, b| a.backend_id.cmp(&b.backend_id));
    entries
}

/// Hash of the roster; changes whenever a backend, model or prompt changes.
pub fn batch_identity(roster: &[Box<dyn Classifier>]) -> String {
    let mut h = Sha256::new();
    for e in roster_entries(roster) {
        h.update(e.backend_id.as_bytes());
        h.update([0]);
        h.update(e.fingerprint.as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..16])
}

/// Exclusive lock on the store directory, released on drop (also when the
/// process dies).
pub struct BatchLock {
    _file: File,
}

impl BatchLock {
    pub fn acquire(dir: &Path) -> Result<Self, BatchError> {
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)?;
        match file.try_lock() {
            Ok(()) => Ok(BatchLock { _file: file }),
            Err(std::fs::TryLockError::WouldBlock) => Err(BatchError::Locked(path)),
            Err(std::fs::TryLockError::Error(e)) => Err(e.into()),
        }
    }
}

/// Everything a run needs besides the store.
pub struct BatchInput<'a> {
    pub records: &'a [CrashRecord],
    pub thresholds: &'a ThresholdConfig,
    pub rules: &'a IndicatorRuleSet,
    pub roster: &'a [Box<dyn Classifier>],
    pub policy: &'a EnsemblePolicy,
    pub settings: &'a BatchSettings,
}

/// Runs `backend` over `records` with its configured concurrency, in input
/// order. `before` may supply a result without calling the backend; `after`
/// sees each fresh result as soon as it exists.
pub(crate) fn classify_pool<F, G>(
    backend: &dyn Classifier,
    records: &[&CrashRecord],
    before: F,
    after: G,
) -> Vec<(Result<Verdict, BackendError>, bool)>
where
    F: Fn(&CrashRecord) -> Option<Verdict> + Sync,
    G: Fn(&Verdict) -> Result<(), BackendError> + Sync,
{
    let slots: Vec<Mutex<Option<(Result<Verdict, BackendError>, bool)>>> =
        records.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = backend.concurrency().max(1).min(records.len().max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(r) = records.get(i) else { break };
                    let out = match before(r) {
                        Some(v) => (Ok(v), true),
                        None => {
                            let res = backend.classify(r).and_then(|v| after(&v).map(|_| v));
                            (res, false)
                        }
                    };
                    *slots[i].lock().expect("slot") = Some(out);
                })
            })
            .collect();
        for h in handles {
            if let Err(panic) = h.join() {
                std::panic::resume_unwind(panic);
            }
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot").expect("every slot filled"))
        .collect()
}

/// Records left unprocessed: the backend could not be reached or is
/// misconfigured, so a retry later may succeed.
fn leaves_unprocessed(e: &BackendError) -> bool {
    matches!(e.category, ErrorCategory::Transport | ErrorCategory::Config)
}

pub fn run_batch(input: &BatchInput<'_>, store: &Store) -> Result<BatchSummary, BatchError> {
    if input.roster.is_empty() {
        return Err(BatchError::NoBackends);
    }
    let ids: Vec<&str> = input.roster.iter().map(|b| b.backend_id()).collect();
    input.policy.validate(&ids)?;
    let dir = store.journal_path().parent().unwrap_or(Path::new("."));
    let _lock = BatchLock::acquire(dir)?;
    store.refresh()?;

    let started_at = Utc::now();
    let clock = Instant::now();
    let identity = batch_identity(input.roster);
    let settings = input.settings;

    let mut selected: Vec<&CrashRecord> = {
        let state = store.read();
        input
            .records
            .iter()
            .filter(|r| settings.reprocess || !state.is_processed(&identity, &r.record_id))
            .filter(|r| settings.since.is_none_or(|since| r.occurred_at >= since))
            .collect()
    };
    selected.sort_by(|a, b| {
        a.occurred_at
            .cmp(&b.occurred_at)
            .then_with(|| a.record_id.cmp(&b.record_id))
    });
    if let Some(n) = settings.batch_size {
        selected.truncate(n);
    }

    let mut summary = BatchSummary {
        identity: identity.clone(),
        roster: roster_entries(input.roster),
        records_in: selected.len(),
        unfilterable: 0,
        pairs: 0,
        passed_stfilter: 0,
        passed_kwfilter: 0,
        auto_yes: 0,
        auto_no: 0,
        auto_decided: 0,
        flagged: 0,
        filtered_out: 0,
        errored: 0,
        filtered_reasons: BTreeMap::new(),
        backends: input
            .roster
            .iter()
            .map(|b| (b.backend_id().to_string(), BackendStats::default()))
            .collect(),
        timing: RunTiming {
            started_at,
            finished_at: started_at,
            wall_s: 0.0,
            backend_s: input
                .roster
                .iter()
                .map(|b| (b.backend_id().to_string(), 0.0))
                .collect(),
        },
    };

    // earlier records pair against the whole corpus, not only this batch
    let selected_ids: HashSet<&str> = selected.iter().map(|r| r.record_id.as_str()).collect();
    let (pairs, _) = pair_candidates(input.records, input.thresholds);
    let mut paired: HashSet<&str> = HashSet::new();
    for p in &pairs {
        if let Some(id) = selected_ids.get(p.secondary_id.as_str()) {
            summary.pairs += 1;
            paired.insert(id);
        }
    }

    let mut candidates: Vec<&CrashRecord> = Vec::new();
    let filter_out =
        |summary: &mut BatchSummary, r: &CrashRecord, reason: &str| -> Result<(), BatchError> {
            store.record_outcome(
                &identity,
                &r.record_id,
                RecordOutcome::Filtered {
                    reason: reason.to_string(),
                },
                settings.reprocess,
            )?;
            summary.filtered_out += 1;
            *summary
                .filtered_reasons
                .entry(reason.to_string())
                .or_default() += 1;
            Ok(())
        };
    for r in &selected {
        let unfilterable = !r.is_filterable();
        summary.unfilterable += unfilterable as usize;
        if !unfilterable && !paired.contains(r.record_id.as_str()) {
            filter_out(&mut summary, r, REASON_NO_PAIR)?;
            continue;
        }
        summary.passed_stfilter += 1;
        if !input.rules.passes(&r.narrative).0 {
            filter_out(&mut summary, r, REASON_NO_INDICATOR)?;
            continue;
        }
        summary.passed_kwfilter += 1;
        candidates.push(r);
    }

    for chunk in candidates.chunks(settings.chunk_size.max(1)) {
        let cached: HashMap<&str, BTreeMap<String, Verdict>> = {
            let state = store.read();
            chunk
                .iter()
                .filter_map(|r| {
                    state
                        .cached_verdicts(&identity, &r.record_id)
                        .map(|m| (r.record_id.as_str(), m.clone()))
                })
                .collect()
        };
        let per_backend: Vec<(String, Vec<(Result<Verdict, BackendError>, bool)>, Duration)> =
            std::thread::scope(|s| {
                let handles: Vec<_> = input
                    .roster
                    .iter()
                    .map(|backend| {
                        let cached = &cached;
                        let identity = &identity;
                        s.spawn(move || {
                            let id = backend.backend_id();
                            let t = Instant::now();
                            let out = classify_pool(
                                backend.as_ref(),
                                chunk,
                                |r| {
                                    cached
                                        .get(r.record_id.as_str())
                                        .and_then(|m| m.get(id))
                                        .cloned()
                                },
                                |v| {
                                    store.record_verdict(identity, v.clone()).map_err(|e| {
                                        BackendError::new(
                                            id,
                                            ErrorCategory::Transport,
                                            format!("journal: {e}"),
                                        )
                                    })
                                },
                            );
                            (id.to_string(), out, t.elapsed())
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                    .collect()
            });

        for (id, results, elapsed) in &per_backend {
            *summary.timing.backend_s.entry(id.clone()).or_default() += elapsed.as_secs_f64();
            let stats = summary.backends.entry(id.clone()).or_default();
            for (res, reused) in results {
                match res {
                    Ok(v) => {
                        if *reused {
                            stats.reused += 1;
                        } else {
                            stats.classified += 1;
                        }
                        if v.answer.is_yes() {
                            stats.yes += 1;
                        } else {
                            stats.no += 1;
                        }
                    }
                    Err(_) => stats.errors += 1,
                }
            }
        }

        for (i, r) in chunk.iter().enumerate() {
            let results: Vec<BackendResult> = per_backend
                .iter()
                .map(|(_, res, _)| BackendResult::from(res[i].0.clone()))
                .collect();
            let unreachable = results
                .iter()
                .any(|b| matches!(b, BackendResult::Error(e) if leaves_unprocessed(e)));
            if unreachable {
                summary.errored += 1;
                continue;
            }
            let mut decision = aggregate(&results, input.policy)?;
            decision.record_id = r.record_id.clone();
            let outcome = match decision.outcome {
                Outcome::Flagged => {
                    summary.flagged += 1;
                    RecordOutcome::Flagged {
                        item: ReviewItem {
                            record_id: r.record_id.clone(),
                            decision,
                            status: ReviewStatus::Pending,
                            resolution: None,
                            enqueued_at: Utc::now(),
                        },
                    }
                }
                auto => {
                    if auto == Outcome::AutoYes {
                        summary.auto_yes += 1;
                    } else {
                        summary.auto_no += 1;
                    }
                    summary.auto_decided += 1;
                    RecordOutcome::Decided { decision }
                }
            };
            store.record_outcome(&identity, &r.record_id, outcome, settings.reprocess)?;
        }
    }

    summary.timing.finished_at = Utc::now();
    summary.timing.wall_s = clock.elapsed().as_secs_f64();
    debug_assert!(summary.is_conserved());
    store.record_run(summary.clone())?;
    Ok(summary)
}

/// Per-record outcomes under `identity` in record-id order, without
/// timestamps or latencies, as JSON lines.
pub fn canonical_outcomes(state: &StoreState, identity: &str) -> String {
    let Some(map) = state.processed(identity) else {
        return String::new();
    };
    let ordered: BTreeMap<&String, &RecordOutcome> = map.iter().collect();
    let mut out = String::new();
    for (id, outcome) in ordered {
        let mut v = serde_json::to_value(outcome).expect("outcome serializes");
        strip_volatile(&mut v);
        let line = serde_json::json!({"record_id": id, "outcome": v});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}

fn strip_volatile(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            for key in ["latency_ms", "enqueued_at", "resolved_at", "at"] {
                m.remove(key);
            }
            m.values_mut().for_each(strip_volatile);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(strip_volatile),
        _ => {}
    }
}
