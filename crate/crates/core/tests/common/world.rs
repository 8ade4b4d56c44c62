//! A synthetic corpus, a logreg trained on it, and scriptable test backends.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crashqc_core::backend::{BackendError, BackendKind, Classifier, LogRegBackend};
use crashqc_core::corpus::{split_by_year, CrashRecord};
use crashqc_core::llm::{Answer, Verdict};
use crashqc_core::pipeline::{generate_synthetic_corpus, train_logreg, SynthSpec, TrainOptions};

pub struct World {
    pub records: Vec<CrashRecord>,
    pub labels: HashMap<String, bool>,
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

pub fn world(n: usize, seed: u64) -> World {
    let corpus = generate_synthetic_corpus(&SynthSpec::new(n, 0.228, seed)).unwrap();
    let labels = corpus
        .labels
        .iter()
        .map(|l| (l.record_id.clone(), l.is_secondary))
        .collect();
    let split = split_by_year(&corpus.records, 2021);
    World {
        records: corpus.records,
        labels,
        train: split.train,
        test: split.test,
    }
}

pub fn logreg(w: &World, id: &str) -> LogRegBackend {
    let trained = train_logreg(&w.records, &w.labels, &w.train, &TrainOptions::default()).unwrap();
    LogRegBackend::new(id, trained.model, trained.vectorizer).unwrap()
}

/// Answers from a cue list; counts calls and completions per record and can
/// be armed to panic once on its n-th call.
pub struct Scripted {
    pub id: String,
    pub cues: Vec<&'static str>,
    pub calls: Arc<AtomicUsize>,
    pub completed: Arc<Mutex<HashMap<String, usize>>>,
    pub panic_on_call: Option<usize>,
    pub panicked: Arc<AtomicBool>,
    pub workers: usize,
}

impl Scripted {
    pub fn new(id: &str, cues: &[&'static str]) -> Self {
        Scripted {
            id: id.into(),
            cues: cues.to_vec(),
            calls: Arc::default(),
            completed: Arc::default(),
            panic_on_call: None,
            panicked: Arc::default(),
            workers: 2,
        }
    }

    /// A second handle on the same counters, as a restarted process would
    /// build the same backend.
    pub fn share(&self) -> Self {
        Scripted {
            id: self.id.clone(),
            cues: self.cues.clone(),
            calls: self.calls.clone(),
            completed: self.completed.clone(),
            panic_on_call: self.panic_on_call,
            panicked: self.panicked.clone(),
            workers: self.workers,
        }
    }

    pub fn max_completions(&self) -> usize {
        self.completed
            .lock()
            .unwrap()
            .values()
            .copied()
            .max()
            .unwrap_or(0)
    }

    pub fn completions(&self) -> usize {
        self.completed.lock().unwrap().values().sum()
    }
}

impl Classifier for Scripted {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::PromptLLM
    }

    fn fingerprint(&self) -> String {
        format!("scripted:{}", self.cues.join("|"))
    }

    fn concurrency(&self) -> usize {
        self.workers
    }

    fn classify(&self, record: &CrashRecord) -> Result<Verdict, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if self.panic_on_call == Some(n) && !self.panicked.swap(true, Ordering::SeqCst) {
            panic!("scripted crash on call {n}");
        }
        let text = record.narrative.to_lowercase();
        let yes = self.cues.iter().any(|c| text.contains(c));
        *self
            .completed
            .lock()
            .unwrap()
            .entry(record.record_id.clone())
            .or_default() += 1;
        Ok(Verdict {
            backend_id: self.id.clone(),
            record_id: record.record_id.clone(),
            answer: if yes { Answer::Yes } else { Answer::No },
            probability: if yes { 0.9 } else { 0.1 },
            explanation: "scripted".into(),
            latency_ms: 1,
            prompt_version: "scripted".into(),
            raw_response: String::new(),
        })
    }
}
