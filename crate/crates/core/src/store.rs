//! Local persistent store: label history, review queue, batch progress and
//! evaluation results, kept in one append-only JSON-lines journal.
//!
//! Every state change is a single journal line, so a record's batch outcome
//! and its review-queue entry land atomically, and a resolution and its label
//! write are one event. On open the journal is replayed; a torn final line
//! (no trailing newline) from an interrupted write is discarded.
//!
//! Writers are serialized in-process by a lock and across processes by an
//! exclusive file lock held for the duration of an append.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{RwLock, RwLockReadGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, LabelSource};
use crate::ensemble::{
    tally_resolution, AgreementStats, EnsembleDecision, Outcome, Resolution, ReviewItem,
    ReviewStatus,
};
use crate::evalkit::EvalResult;
use crate::llm::Verdict;
use crate::pipeline::BatchSummary;

pub const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line} is corrupt: {message}")]
    Corrupt { line: usize, message: String },
    #[error("unknown record {0}")]
    UnknownRecord(String),
    #[error("record {0} already has a pending review item")]
    DuplicatePending(String),
    #[error("decision for {0} is not flagged; only flagged decisions are queued")]
    NotFlagged(String),
    #[error("no review item for {0}")]
    UnknownItem(String),
    #[error("review item for {0} is already resolved")]
    AlreadyResolved(String),
    #[error("record {record_id} already processed under batch identity {identity}")]
    AlreadyProcessed { record_id: String, identity: String },
}

/// What a batch did with one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordOutcome {
    Decided { decision: EnsembleDecision },
    Flagged { item: ReviewItem },
    Filtered { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Label {
        label: Label,
    },
    Enqueued {
        item: ReviewItem,
    },
    Resolved {
        record_id: String,
        resolution: Resolution,
        label: Label,
    },
    Skipped {
        record_id: String,
        at: DateTime<Utc>,
    },
    /// A backend verdict produced inside a batch, kept until the record's
    /// outcome is recorded so a restarted batch does not repeat the call.
    Classified {
        identity: String,
        verdict: Verdict,
    },
    Processed {
        identity: String,
        record_id: String,
        outcome: RecordOutcome,
        at: DateTime<Utc>,
    },
    RunCompleted {
        summary: BatchSummary,
    },
    Evaluated {
        results: Vec<EvalResult>,
        at: DateTime<Utc>,
    },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    seq: u64,
    event: Event,
}

/// In-memory view rebuilt from the journal.
#[derive(Debug, Default)]
pub struct StoreState {
    labels: HashMap<String, Vec<Label>>,
    items: Vec<ReviewItem>,
    /// record_id -> index of the latest item in `items`
    latest_item: HashMap<String, usize>,
    processed: HashMap<String, HashMap<String, RecordOutcome>>,
    /// (identity, record_id) -> backend_id -> verdict
    in_flight: HashMap<(String, String), BTreeMap<String, Verdict>>,
    decisions: HashMap<String, EnsembleDecision>,
    agreement: BTreeMap<String, AgreementStats>,
    runs: Vec<BatchSummary>,
    evaluations: Vec<EvalResult>,
    seq: u64,
}

impl StoreState {
    fn apply(&mut self, event: Event) {
        match event {
            Event::Label { label } => self
                .labels
                .entry(label.record_id.clone())
                .or_default()
                .push(label),
            Event::Enqueued { item } => self.push_item(item),
            Event::Resolved {
                record_id,
                resolution,
                label,
            } => {
                if let Some(&i) = self.latest_item.get(&record_id) {
                    let item = &mut self.items[i];
                    tally_resolution(&mut self.agreement, &item.decision, resolution.is_secondary);
                    item.status = ReviewStatus::Resolved;
                    item.resolution = Some(resolution);
                }
                self.labels.entry(record_id).or_default().push(label);
            }
            Event::Skipped { record_id, .. } => {
                if let Some(&i) = self.latest_item.get(&record_id) {
                    self.items[i].status = ReviewStatus::Skipped;
                }
            }
            Event::Classified { identity, verdict } => {
                self.in_flight
                    .entry((identity, verdict.record_id.clone()))
                    .or_default()
                    .insert(verdict.backend_id.clone(), verdict);
            }
            Event::Processed {
                identity,
                record_id,
                outcome,
                ..
            } => {
                self.in_flight
                    .remove(&(identity.clone(), record_id.clone()));
                match &outcome {
                    RecordOutcome::Decided { decision } => {
                        self.decisions.insert(record_id.clone(), decision.clone());
                    }
                    RecordOutcome::Flagged { item } => {
                        self.decisions
                            .insert(record_id.clone(), item.decision.clone());
                        self.push_item(item.clone());
                    }
                    RecordOutcome::Filtered { .. } => {}
                }
                self.processed
                    .entry(identity)
                    .or_default()
                    .insert(record_id, outcome);
            }
            Event::RunCompleted { summary } => self.runs.push(summary),
            Event::Evaluated { results, .. } => self.evaluations = results,
        }
    }

    fn push_item(&mut self, item: ReviewItem) {
        self.decisions
            .entry(item.record_id.clone())
            .or_insert_with(|| item.decision.clone());
        self.latest_item
            .insert(item.record_id.clone(), self.items.len());
        self.items.push(item);
    }

    pub fn active_label(&self, record_id: &str) -> Option<&Label> {
        self.labels.get(record_id).and_then(|h| h.last())
    }

    pub fn label_history(&self, record_id: &str) -> &[Label] {
        self.labels
            .get(record_id)
            .map(|h| h.as_slice())
            .unwrap_or(&[])
    }

    pub fn active_label_count(&self) -> usize {
        self.labels.values().filter(|h| !h.is_empty()).count()
    }

    pub fn active_labels(&self) -> HashMap<String, bool> {
        self.labels
            .iter()
            .filter_map(|(id, h)| h.last().map(|l| (id.clone(), l.is_secondary)))
            .collect()
    }

    pub fn review_item(&self, record_id: &str) -> Option<&ReviewItem> {
        self.latest_item.get(record_id).map(|&i| &self.items[i])
    }

    /// Latest item per record with `status`, oldest enqueue first.
    pub fn queue(&self, status: ReviewStatus) -> Vec<&ReviewItem> {
        let mut items: Vec<&ReviewItem> = self
            .latest_item
            .values()
            .map(|&i| &self.items[i])
            .filter(|it| it.status == status)
            .collect();
        items.sort_by(|a, b| {
            a.enqueued_at
                .cmp(&b.enqueued_at)
                .then_with(|| a.record_id.cmp(&b.record_id))
        });
        items
    }

    pub fn all_items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn is_processed(&self, identity: &str, record_id: &str) -> bool {
        self.processed
            .get(identity)
            .is_some_and(|m| m.contains_key(record_id))
    }

    pub fn processed(&self, identity: &str) -> Option<&HashMap<String, RecordOutcome>> {
        self.processed.get(identity)
    }

    /// Verdicts already obtained for a record not yet processed under `identity`.
    pub fn cached_verdicts(
        &self,
        identity: &str,
        record_id: &str,
    ) -> Option<&BTreeMap<String, Verdict>> {
        self.in_flight
            .get(&(identity.to_string(), record_id.to_string()))
    }

    pub fn latest_decision(&self, record_id: &str) -> Option<&EnsembleDecision> {
        self.decisions.get(record_id)
    }

    pub fn agreement(&self) -> &BTreeMap<String, AgreementStats> {
        &self.agreement
    }

    pub fn runs(&self) -> &[BatchSummary] {
        &self.runs
    }

    pub fn evaluations(&self) -> &[EvalResult] {
        &self.evaluations
    }
}

struct Inner {
    file: File,
    /// Bytes of the journal already applied.
    offset: u64,
    state: StoreState,
}

pub struct Store {
    path: PathBuf,
    inner: RwLock<Inner>,
    corpus_ids: RwLock<Option<HashSet<String>>>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish()
    }
}

/// Applies complete lines from `bytes`; returns bytes consumed.
fn replay(bytes: &[u8], state: &mut StoreState, first_line: usize) -> Result<usize, StoreError> {
    let mut consumed = 0;
    let mut line_no = first_line;
    while consumed < bytes.len() {
        let rest = &bytes[consumed..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            log::warn!("discarding torn journal tail of {} bytes", rest.len());
            break;
        };
        let line = &rest[..nl];
        line_no += 1;
        if !line.iter().all(|b| b.is_ascii_whitespace()) {
            let entry: Entry = serde_json::from_slice(line).map_err(|e| StoreError::Corrupt {
                line: line_no,
                message: e.to_string(),
            })?;
            state.seq = entry.seq;
            state.apply(entry.event);
        }
        consumed += nl + 1;
    }
    Ok(consumed)
}

impl Store {
    /// Opens (creating if needed) the store in `dir`.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(JOURNAL_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        file.lock()?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut state = StoreState::default();
        let consumed = replay(&bytes, &mut state, 0)?;
        if consumed < bytes.len() {
            file.set_len(consumed as u64)?;
            file.sync_all()?;
        }
        file.unlock()?;
        Ok(Store {
            path,
            inner: RwLock::new(Inner {
                file,
                offset: consumed as u64,
                state,
            }),
            corpus_ids: RwLock::new(None),
        })
    }

    pub fn journal_path(&self) -> &Path {
        &self.path
    }

    /// Restricts label writes to these record ids.
    pub fn attach_corpus<I: IntoIterator<Item = String>>(&self, ids: I) {
        *self.corpus_ids.write().expect("corpus lock") = Some(ids.into_iter().collect());
    }

    fn check_known(&self, record_id: &str) -> Result<(), StoreError> {
        let ids = self.corpus_ids.read().expect("corpus lock");
        match ids.as_ref() {
            Some(set) if set.contains(record_id) => Ok(()),
            _ => Err(StoreError::UnknownRecord(record_id.to_string())),
        }
    }

    pub fn read(&self) -> StoreReadGuard<'_> {
        StoreReadGuard(self.inner.read().expect("store lock"))
    }

    /// Applies journal lines appended by other processes.
    pub fn refresh(&self) -> Result<(), StoreError> {
        let mut inner = self.inner.write().expect("store lock");
        Self::catch_up(&mut inner)
    }

    fn catch_up(inner: &mut Inner) -> Result<(), StoreError> {
        let len = inner.file.metadata()?.len();
        if len <= inner.offset {
            return Ok(());
        }
        let mut f = &inner.file;
        f.seek(SeekFrom::Start(inner.offset))?;
        let mut bytes = Vec::with_capacity((len - inner.offset) as usize);
        f.take(len - inner.offset).read_to_end(&mut bytes)?;
        let consumed = replay(&bytes, &mut inner.state, 0)?;
        inner.offset += consumed as u64;
        Ok(())
    }

    /// Validates against current state and appends the resulting event.
    fn commit<T>(
        &self,
        build: impl FnOnce(&StoreState) -> Result<(Event, T), StoreError>,
    ) -> Result<T, StoreError> {
        let mut inner = self.inner.write().expect("store lock");
        inner.file.lock()?;
        let result = (|| {
            Self::catch_up(&mut inner)?;
            let (event, out) = build(&inner.state)?;
            let seq = inner.state.seq + 1;
            let mut line = serde_json::to_vec(&Entry {
                seq,
                event: event.clone(),
            })
            .map_err(|e| StoreError::Corrupt {
                line: 0,
                message: e.to_string(),
            })?;
            line.push(b'\n');
            inner.file.write_all(&line)?;
            inner.file.sync_data()?;
            inner.offset += line.len() as u64;
            inner.state.seq = seq;
            inner.state.apply(event);
            Ok(out)
        })();
        inner.file.unlock()?;
        result
    }

    pub fn upsert_label(
        &self,
        record_id: &str,
        is_secondary: bool,
        source: LabelSource,
        note: Option<String>,
    ) -> Result<Label, StoreError> {
        self.check_known(record_id)?;
        let label = Label {
            record_id: record_id.to_string(),
            is_secondary,
            source,
            note,
            labeled_at: Utc::now(),
        };
        self.commit(|_| {
            Ok((
                Event::Label {
                    label: label.clone(),
                },
                label,
            ))
        })
    }

    pub fn enqueue(&self, decision: EnsembleDecision) -> Result<ReviewItem, StoreError> {
        if decision.outcome != Outcome::Flagged {
            return Err(StoreError::NotFlagged(decision.record_id));
        }
        self.commit(|state| {
            if state
                .review_item(&decision.record_id)
                .is_some_and(|it| it.status == ReviewStatus::Pending)
            {
                return Err(StoreError::DuplicatePending(decision.record_id.clone()));
            }
            let item = ReviewItem {
                record_id: decision.record_id.clone(),
                decision,
                status: ReviewStatus::Pending,
                resolution: None,
                enqueued_at: Utc::now(),
            };
            Ok((Event::Enqueued { item: item.clone() }, item))
        })
    }

    /// Resolves a pending (or skipped) item and writes the analyst's label in
    /// the same journal event.
    pub fn resolve(
        &self,
        record_id: &str,
        is_secondary: bool,
        analyst: &str,
        note: Option<String>,
    ) -> Result<ReviewItem, StoreError> {
        self.check_known(record_id)?;
        self.commit(|state| {
            let item = state
                .review_item(record_id)
                .ok_or_else(|| StoreError::UnknownItem(record_id.to_string()))?;
            if item.status == ReviewStatus::Resolved {
                return Err(StoreError::AlreadyResolved(record_id.to_string()));
            }
            let now = Utc::now();
            let resolution = Resolution {
                is_secondary,
                analyst: analyst.to_string(),
                note: note.clone(),
                resolved_at: now,
            };
            let label = Label {
                record_id: record_id.to_string(),
                is_secondary,
                source: LabelSource::AnalystUI,
                note,
                labeled_at: now,
            };
            let mut resolved = item.clone();
            resolved.status = ReviewStatus::Resolved;
            resolved.resolution = Some(resolution.clone());
            Ok((
                Event::Resolved {
                    record_id: record_id.to_string(),
                    resolution,
                    label,
                },
                resolved,
            ))
        })
    }

    /// Defers a pending item without recording a determination.
    pub fn skip(&self, record_id: &str) -> Result<ReviewItem, StoreError> {
        self.commit(|state| {
            let item = state
                .review_item(record_id)
                .ok_or_else(|| StoreError::UnknownItem(record_id.to_string()))?;
            if item.status == ReviewStatus::Resolved {
                return Err(StoreError::AlreadyResolved(record_id.to_string()));
            }
            let mut skipped = item.clone();
            skipped.status = ReviewStatus::Skipped;
            Ok((
                Event::Skipped {
                    record_id: record_id.to_string(),
                    at: Utc::now(),
                },
                skipped,
            ))
        })
    }

    pub fn record_verdict(&self, identity: &str, verdict: Verdict) -> Result<(), StoreError> {
        self.commit(|_| {
            Ok((
                Event::Classified {
                    identity: identity.to_string(),
                    verdict,
                },
                (),
            ))
        })
    }

    /// Records a batch outcome; a flagged outcome enqueues its review item in
    /// the same event, superseding any item still pending for the record.
    /// Recording twice under one identity is refused unless `reprocess`.
    pub fn record_outcome(
        &self,
        identity: &str,
        record_id: &str,
        outcome: RecordOutcome,
        reprocess: bool,
    ) -> Result<(), StoreError> {
        self.commit(|state| {
            if !reprocess && state.is_processed(identity, record_id) {
                return Err(StoreError::AlreadyProcessed {
                    record_id: record_id.to_string(),
                    identity: identity.to_string(),
                });
            }
            let event = Event::Processed {
                identity: identity.to_string(),
                record_id: record_id.to_string(),
                outcome,
                at: Utc::now(),
            };
            Ok((event, ()))
        })
    }

    pub fn record_run(&self, summary: BatchSummary) -> Result<(), StoreError> {
        self.commit(|_| Ok((Event::RunCompleted { summary }, ())))
    }

    pub fn record_evaluation(&self, results: Vec<EvalResult>) -> Result<(), StoreError> {
        self.commit(|_| {
            Ok((
                Event::Evaluated {
                    results,
                    at: Utc::now(),
                },
                (),
            ))
        })
    }
}

pub struct StoreReadGuard<'a>(RwLockReadGuard<'a, Inner>);

impl std::ops::Deref for StoreReadGuard<'_> {
    type Target = StoreState;

    fn deref(&self) -> &StoreState {
        &self.0.state
    }
}

/// Reads every event in a journal file, for inspection and tests.
pub fn read_journal(path: &Path) -> Result<Vec<Event>, StoreError> {
    let bytes = std::fs::read(path)?;
    let mut events = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        match serde_json::from_slice::<Entry>(line) {
            Ok(e) => events.push(e.event),
            Err(e) if i + 1 == bytes.split(|&b| b == b'\n').count() => {
                log::warn!("ignoring torn final journal line: {e}");
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(events)
}
