//! Orchestration: configuration, synthetic corpora, incremental batch runs
//! and training/evaluation helpers.

mod batch;
mod config;
mod evaluate;
mod synth;

pub use batch::{
    batch_identity, batch_state, canonical_outcomes, roster_entries, run_batch, BackendStats,
    BatchError, BatchInput, BatchLock, BatchState, BatchSummary, RosterEntry, RunTiming, LOCK_FILE,
    REASON_NO_INDICATOR, REASON_NO_PAIR,
};
pub use config::{
    build_backend, BackendSpec, BatchSettings, ConfigError, CorpusSettings, PipelineConfig,
    ServiceSettings, StoreSettings, AUTH_TOKEN_ENV, DEFAULT_BIND,
};
pub use evaluate::{
    evaluate_backend, train_logreg, BackendEvaluation, TrainError, TrainOptions, TrainedModel,
};
pub use synth::{generate_synthetic_corpus, SynthError, SynthSpec, SyntheticCorpus};
