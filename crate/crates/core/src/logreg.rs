//! L2-regularized logistic regression over sparse TF-IDF vectors, trained by
//! full-batch gradient descent from zero initialization.
//!
//! The objective is mean (optionally class-weighted) binary cross-entropy plus
//! `(l2_lambda / 2) * ||w||^2`. The bias is not regularized.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evalkit::ConfusionMatrix;
use crate::textfeat::{SparseVector, Vocabulary};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Weight on positive-class loss terms; 1.0 means unweighted.
    pub positive_weight: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            learning_rate: 0.5,
            l2_lambda: 1e-4,
            epochs: 500,
            seed: 0,
            positive_weight: 1.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogRegError {
    #[error("training set is empty or |X| != |y|")]
    BadShape,
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("loss diverged (non-finite) at epoch {epoch} with learning rate {learning_rate}")]
    Diverged { epoch: usize, learning_rate: f64 },
    #[error("feature index {index} outside model dimension {dim}")]
    DimensionMismatch { index: usize, dim: usize },
    #[error("model was trained against vocabulary {model} but {given} was supplied")]
    VocabularyMismatch { model: String, given: String },
    #[error("invalid hyperparameters: {0}")]
    InvalidParams(String),
    #[error("model file: {0}")]
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub vocab_version: String,
    pub hyperparams: HyperParams,
    pub decision_threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Objective value before each update, followed by the final value.
    pub loss: Vec<f64>,
}

/// Overflow-safe logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Regularized objective and its gradient with respect to (weights, bias).
pub fn loss_and_gradient(
    weights: &[f64],
    bias: f64,
    xs: &[SparseVector],
    ys: &[bool],
    l2_lambda: f64,
    positive_weight: f64,
) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = x.dot_dense(weights) + bias;
        let c = if y { positive_weight } else { 1.0 };
        // -log sigma(z) = softplus(-z); -log(1 - sigma(z)) = softplus(z)
        loss += c * if y { softplus(-z) } else { softplus(z) };
        let residual = c * (sigmoid(z) - if y { 1.0 } else { 0.0 });
        for &(i, v) in x.entries() {
            grad_w[i] += residual * v;
        }
        grad_b += residual;
    }
    loss /= n;
    grad_b /= n;
    let mut reg = 0.0;
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2_lambda * w;
        reg += w * w;
    }
    loss += 0.5 * l2_lambda * reg;
    (loss, grad_w, grad_b)
}

fn check_inputs(xs: &[SparseVector], ys: &[bool], dim: usize) -> Result<(), LogRegError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(LogRegError::BadShape);
    }
    if ys.iter().all(|&y| y) || ys.iter().all(|&y| !y) {
        return Err(LogRegError::SingleClass);
    }
    for x in xs {
        if let Some(index) = x.max_index() {
            if index >= dim {
                return Err(LogRegError::DimensionMismatch { index, dim });
            }
        }
    }
    Ok(())
}

/// Full-batch gradient descent for `hyperparams.epochs` iterations.
pub fn train(
    xs: &[SparseVector],
    ys: &[bool],
    vocab: &Vocabulary,
    hyperparams: &HyperParams,
) -> Result<(LogRegModel, TrainingLog), LogRegError> {
    train_dim(xs, ys, vocab.len(), vocab.version(), hyperparams)
}

pub fn train_dim(
    xs: &[SparseVector],
    ys: &[bool],
    dim: usize,
    vocab_version: String,
    hp: &HyperParams,
) -> Result<(LogRegModel, TrainingLog), LogRegError> {
    if !(hp.learning_rate > 0.0) || hp.l2_lambda < 0.0 || !(hp.positive_weight > 0.0) {
        return Err(LogRegError::InvalidParams(format!("{hp:?}")));
    }
    check_inputs(xs, ys, dim)?;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut log = TrainingLog::default();
    for epoch in 0..hp.epochs {
        let (loss, gw, gb) = loss_and_gradient(&w, b, xs, ys, hp.l2_lambda, hp.positive_weight);
        if !loss.is_finite() {
            return Err(LogRegError::Diverged {
                epoch,
                learning_rate: hp.learning_rate,
            });
        }
        log.loss.push(loss);
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= hp.learning_rate * gi;
        }
        b -= hp.learning_rate * gb;
    }
    let (final_loss, _, _) = loss_and_gradient(&w, b, xs, ys, hp.l2_lambda, hp.positive_weight);
    if !final_loss.is_finite() || w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(LogRegError::Diverged {
            epoch: hp.epochs,
            learning_rate: hp.learning_rate,
        });
    }
    log.loss.push(final_loss);
    let model = LogRegModel {
        weights: w,
        bias: b,
        vocab_version,
        hyperparams: hp.clone(),
        decision_threshold: 0.5,
    };
    Ok((model, log))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    vocab_version: String,
    dimension: usize,
    weights: BTreeMap<usize, f64>,
    bias: f64,
    hyperparams: HyperParams,
    decision_threshold: f64,
}

impl LogRegModel {
    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    pub fn decision_function(&self, x: &SparseVector) -> Result<f64, LogRegError> {
        if let Some(index) = x.max_index() {
            if index >= self.weights.len() {
                return Err(LogRegError::DimensionMismatch {
                    index,
                    dim: self.weights.len(),
                });
            }
        }
        Ok(x.dot_dense(&self.weights) + self.bias)
    }

    pub fn predict_proba(&self, x: &SparseVector) -> Result<f64, LogRegError> {
        Ok(sigmoid(self.decision_function(x)?))
    }

    pub fn predict(&self, x: &SparseVector) -> Result<bool, LogRegError> {
        Ok(self.predict_proba(x)? >= self.decision_threshold)
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<(), LogRegError> {
        let given = vocab.version();
        if given != self.vocab_version || vocab.len() != self.weights.len() {
            return Err(LogRegError::VocabularyMismatch {
                model: self.vocab_version.clone(),
                given,
            });
        }
        Ok(())
    }

    /// `k` most positive and `k` most negative coefficients; ties are broken
    /// by term in lexicographic order.
    pub fn top_features(
        &self,
        vocab: &Vocabulary,
        k: usize,
    ) -> (Vec<(String, f64)>, Vec<(String, f64)>) {
        let mut all: Vec<(String, f64)> = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, &w)| (vocab.term(i).unwrap_or("?").to_string(), w))
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let positive: Vec<_> = all.iter().take(k).cloned().collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let negative: Vec<_> = all.into_iter().take(k).collect();
        (positive, negative)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            vocab_version: self.vocab_version.clone(),
            dimension: self.weights.len(),
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i, *w))
                .collect(),
            bias: self.bias,
            hyperparams: self.hyperparams.clone(),
            decision_threshold: self.decision_threshold,
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LogRegError> {
        let f: ModelFile = serde_json::from_str(s).map_err(|e| LogRegError::File(e.to_string()))?;
        if f.format_version != MODEL_FORMAT_VERSION {
            return Err(LogRegError::File(format!(
                "unsupported format_version {}",
                f.format_version
            )));
        }
        if !(f.decision_threshold > 0.0 && f.decision_threshold < 1.0) {
            return Err(LogRegError::File(
                "decision_threshold must be in (0, 1)".into(),
            ));
        }
        let mut weights = vec![0.0; f.dimension];
        for (i, w) in f.weights {
            if i >= f.dimension || !w.is_finite() {
                return Err(LogRegError::File(format!("bad weight at index {i}")));
            }
            weights[i] = w;
        }
        if !f.bias.is_finite() {
            return Err(LogRegError::File("bias is not finite".into()));
        }
        Ok(LogRegModel {
            weights,
            bias: f.bias,
            vocab_version: f.vocab_version,
            hyperparams: f.hyperparams,
            decision_threshold: f.decision_threshold,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LogRegError> {
        std::fs::write(path, self.to_json()).map_err(|e| LogRegError::File(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LogRegError> {
        let text = std::fs::read_to_string(path).map_err(|e| LogRegError::File(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// Grid-search space for [`tune`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub learning_rates: Vec<f64>,
    pub l2_lambdas: Vec<f64>,
    pub folds: usize,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            learning_rates: vec![0.1, 0.5, 1.0],
            l2_lambdas: vec![0.0, 1e-4, 1e-3],
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub best: HyperParams,
    /// (learning_rate, l2_lambda, mean cross-validated F1) per grid point.
    pub scores: Vec<(f64, f64, f64)>,
}

/// Seeded stratified fold assignment: each class is shuffled and dealt
/// round-robin across folds.
pub fn stratified_folds(ys: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; ys.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    assignment
}

/// Grid search over learning rate and L2 strength by stratified k-fold
/// cross-validated F1. Ties keep the earlier grid point.
pub fn tune(
    xs: &[SparseVector],
    ys: &[bool],
    dim: usize,
    base: &HyperParams,
    grid: &TuningGrid,
) -> Result<TuningResult, LogRegError> {
    if grid.folds < 2 || grid.learning_rates.is_empty() || grid.l2_lambdas.is_empty() {
        return Err(LogRegError::InvalidParams(
            "grid needs >= 2 folds and non-empty axes".into(),
        ));
    }
    check_inputs(xs, ys, dim)?;
    let assignment = stratified_folds(ys, grid.folds, base.seed);
    let mut scores = Vec::new();
    let mut best: Option<(f64, HyperParams)> = None;
    for &lr in &grid.learning_rates {
        for &lambda in &grid.l2_lambdas {
            let hp = HyperParams {
                learning_rate: lr,
                l2_lambda: lambda,
                ..base.clone()
            };
            let mut f1_sum = 0.0;
            for fold in 0..grid.folds {
                let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
                for i in 0..xs.len() {
                    if assignment[i] == fold {
                        vx.push(xs[i].clone());
                        vy.push(ys[i]);
                    } else {
                        tx.push(xs[i].clone());
                        ty.push(ys[i]);
                    }
                }
                let f1 = match train_dim(&tx, &ty, dim, String::new(), &hp) {
                    Ok((model, _)) => {
                        let mut cm = ConfusionMatrix::default();
                        for (x, &y) in vx.iter().zip(&vy) {
                            cm.record(model.predict(x)?, y);
                        }
                        cm.f1().unwrap_or(0.0)
                    }
                    Err(LogRegError::Diverged { .. }) => 0.0,
                    Err(e) => return Err(e),
                };
                f1_sum += f1;
            }
            let mean = f1_sum / grid.folds as f64;
            scores.push((lr, lambda, mean));
            if best.as_ref().is_none_or(|(s, _)| mean > *s) {
                best = Some((mean, hp));
            }
        }
    }
    Ok(TuningResult {
        best: best.expect("non-empty grid").1,
        scores,
    })
}
