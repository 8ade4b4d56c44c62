use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Classifier};
use crate::corpus::CrashRecord;
use crate::evalkit::{ConfusionMatrix, EvalResult, Runtime};
use crate::logreg::{train, HyperParams, LogRegError, LogRegModel, TrainingLog};
use crate::textfeat::{TextFeatError, Vectorizer};

use super::batch::classify_pool;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("no labeled training records")]
    NoTrainingData,
    #[error(transparent)]
    Features(#[from] TextFeatError),
    #[error(transparent)]
    Model(#[from] LogRegError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub min_df: usize,
    pub bigrams: bool,
    pub hyperparams: HyperParams,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            min_df: 2,
            bigrams: false,
            hyperparams: HyperParams::default(),
        }
    }
}

pub struct TrainedModel {
    pub model: LogRegModel,
    pub vectorizer: Vectorizer,
    pub log: TrainingLog,
    pub train_s: f64,
}

/// Fits the vocabulary and the model on the labeled records in `train_ids`.
pub fn train_logreg(
    records: &[CrashRecord],
    labels: &HashMap<String, bool>,
    train_ids: &BTreeSet<String>,
    opts: &TrainOptions,
) -> Result<TrainedModel, TrainError> {
    let started = Instant::now();
    let rows: Vec<(&CrashRecord, bool)> = records
        .iter()
        .filter(|r| train_ids.contains(&r.record_id))
        .filter_map(|r| labels.get(&r.record_id).map(|&y| (r, y)))
        .collect();
    if rows.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let texts: Vec<&str> = rows.iter().map(|(r, _)| r.narrative.as_str()).collect();
    let vectorizer = Vectorizer::fit(&texts, opts.min_df, opts.bigrams)?;
    let xs: Vec<_> = texts.iter().map(|t| vectorizer.transform(t)).collect();
    let ys: Vec<bool> = rows.iter().map(|(_, y)| *y).collect();
    let (model, log) = train(&xs, &ys, &vectorizer.vocab, &opts.hyperparams)?;
    Ok(TrainedModel {
        model,
        vectorizer,
        log,
        train_s: started.elapsed().as_secs_f64(),
    })
}

/// A backend's score on the labeled records in `test_ids`.
#[derive(Debug, Clone)]
pub struct BackendEvaluation {
    pub result: EvalResult,
    /// Records the backend failed on; they are left out of the matrix.
    pub errors: Vec<BackendError>,
}

pub fn evaluate_backend(
    backend: &dyn Classifier,
    records: &[CrashRecord],
    labels: &HashMap<String, bool>,
    test_ids: &BTreeSet<String>,
    train_s: Option<f64>,
) -> BackendEvaluation {
    let test: Vec<&CrashRecord> = records
        .iter()
        .filter(|r| test_ids.contains(&r.record_id) && labels.contains_key(&r.record_id))
        .collect();
    let started = Instant::now();
    let results = classify_pool(backend, &test, |_| None, |_| Ok(()));
    let test_s = started.elapsed().as_secs_f64();
    let mut cm = ConfusionMatrix::default();
    let mut errors = Vec::new();
    for (r, (res, _)) in test.iter().zip(results) {
        match res {
            Ok(v) => cm.record(v.answer.is_yes(), labels[&r.record_id]),
            Err(e) => errors.push(e),
        }
    }
    let result = EvalResult::new(backend.backend_id(), cm, Runtime { train_s, test_s });
    BackendEvaluation { result, errors }
}
