//! Confusion matrices, classification metrics, golden-fixture validation and
//! the F1-versus-runtime comparison report.
//!
//! Metrics whose denominator is zero are reported as `None` ("undefined"),
//! never as 0 or NaN.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Golden confusion matrices shipped with the crate.
pub const GOLDEN_FIXTURES_JSON: &str = include_str!("../fixtures/golden_metrics.json");

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("record {0} has a prediction but no active label")]
    Unlabeled(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("malformed fixture file: {0}")]
    Fixture(String),
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionMatrix { tp, fp, fn_, tn }
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn sum_of_falses(&self) -> u64 {
        self.fp + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; undefined when either is, or
    /// when both are zero.
    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn metrics(&self) -> Result<Metrics, EvalError> {
        let accuracy = self.accuracy().ok_or(EvalError::EmptyMatrix)?;
        Ok(Metrics {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
            accuracy,
        })
    }

    /// Metrics as exact rationals `(numerator, denominator)`, for rounding
    /// without floating-point error.
    fn rationals(&self) -> [Option<(u64, u64)>; 4] {
        let nz = |n: u64, d: u64| (d > 0).then_some((n, d));
        let f1 = match (self.precision(), self.recall()) {
            (Some(_), Some(_)) if self.tp > 0 => {
                Some((2 * self.tp, 2 * self.tp + self.fp + self.fn_))
            }
            _ => None,
        };
        [
            nz(self.tp, self.tp + self.fp),
            nz(self.tp, self.tp + self.fn_),
            f1,
            nz(self.tp + self.tn, self.total()),
        ]
    }
}

fn ratio(n: u64, d: u64) -> Option<f64> {
    (d > 0).then(|| n as f64 / d as f64)
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    cm.metrics()
}

/// Builds a confusion matrix; every prediction must have a label.
pub fn confusion<'a, I>(
    predictions: I,
    labels: &HashMap<String, bool>,
) -> Result<ConfusionMatrix, EvalError>
where
    I: IntoIterator<Item = (&'a str, bool)>,
{
    let mut cm = ConfusionMatrix::default();
    for (id, predicted) in predictions {
        let actual = *labels
            .get(id)
            .ok_or_else(|| EvalError::Unlabeled(id.to_string()))?;
        cm.record(predicted, actual);
    }
    Ok(cm)
}

/// Rounds `n / d` half-up to hundredths and returns the hundredths count.
pub fn round_half_up_hundredths(n: u64, d: u64) -> u64 {
    assert!(d > 0, "zero denominator");
    ((200 * n as u128 + d as u128) / (2 * d as u128)) as u64
}

/// Half-up rounding of a float to 2 decimals, for display.
pub fn round2(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-9).floor() / 100.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Runtime {
    pub train_s: Option<f64>,
    pub test_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub backend_id: String,
    pub cm: ConfusionMatrix,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub sum_of_falses: u64,
    pub runtime: Runtime,
}

impl EvalResult {
    pub fn new(backend_id: impl Into<String>, cm: ConfusionMatrix, runtime: Runtime) -> Self {
        EvalResult {
            backend_id: backend_id.into(),
            cm,
            precision: cm.precision(),
            recall: cm.recall(),
            f1: cm.f1(),
            accuracy: cm.accuracy(),
            sum_of_falses: cm.sum_of_falses(),
            runtime,
        }
    }
}

/// Values as printed in the source table (2 decimals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrintedMetrics {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub sum_of_falses: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFixture {
    pub backend_id: String,
    /// `model_comparison` or `model_scale`.
    pub table: String,
    /// Column header as printed.
    pub source_column: String,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
    pub printed: PrintedMetrics,
    pub runtime: Runtime,
}

impl GoldenFixture {
    pub fn cm(&self) -> ConfusionMatrix {
        ConfusionMatrix::new(self.tp, self.fp, self.fn_, self.tn)
    }

    pub fn eval_result(&self) -> EvalResult {
        EvalResult::new(self.backend_id.clone(), self.cm(), self.runtime.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFile {
    pub test_set_size: u64,
    #[serde(default)]
    pub note: String,
    pub fixtures: Vec<GoldenFixture>,
}

impl GoldenFile {
    pub fn parse(s: &str) -> Result<Self, EvalError> {
        let f: GoldenFile =
            serde_json::from_str(s).map_err(|e| EvalError::Fixture(e.to_string()))?;
        if f.fixtures.is_empty() {
            return Err(EvalError::Fixture("no fixtures".into()));
        }
        Ok(f)
    }

    pub fn shipped() -> Self {
        Self::parse(GOLDEN_FIXTURES_JSON).expect("shipped golden fixtures parse")
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let s = std::fs::read_to_string(path).map_err(|e| EvalError::Fixture(e.to_string()))?;
        Self::parse(&s)
    }

    /// One result per distinct backend id, first occurrence wins.
    pub fn unique_results(&self) -> Vec<EvalResult> {
        let mut seen = std::collections::HashSet::new();
        self.fixtures
            .iter()
            .filter(|f| seen.insert(f.backend_id.clone()))
            .map(GoldenFixture::eval_result)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenMismatch {
    pub backend_id: String,
    pub field: String,
    pub expected: String,
    pub computed: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenReport {
    pub checked: usize,
    pub mismatches: Vec<GoldenMismatch>,
}

impl GoldenReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn hundredths(x: f64) -> u64 {
    (x * 100.0).round() as u64
}

/// Recomputes every fixture's metrics, rounds half-up to 2 decimals, and
/// compares against the printed values and the expected column total.
pub fn validate_golden(file: &GoldenFile) -> GoldenReport {
    let mut mismatches = Vec::new();
    let mut push = |id: &str, field: &str, expected: String, computed: String| {
        mismatches.push(GoldenMismatch {
            backend_id: id.to_string(),
            field: field.to_string(),
            expected,
            computed,
        })
    };
    for fx in &file.fixtures {
        let cm = fx.cm();
        if cm.total() != file.test_set_size {
            push(
                &fx.backend_id,
                "total",
                file.test_set_size.to_string(),
                cm.total().to_string(),
            );
        }
        if cm.sum_of_falses() != fx.printed.sum_of_falses {
            push(
                &fx.backend_id,
                "sum_of_falses",
                fx.printed.sum_of_falses.to_string(),
                cm.sum_of_falses().to_string(),
            );
        }
        let [precision, recall, f1, accuracy] = cm.rationals();
        for (field, value, printed) in [
            ("precision", precision, fx.printed.precision),
            ("recall", recall, fx.printed.recall),
            ("f1", f1, fx.printed.f1),
            ("accuracy", accuracy, fx.printed.accuracy),
        ] {
            let expected = hundredths(printed);
            match value {
                Some((n, d)) => {
                    let got = round_half_up_hundredths(n, d);
                    if got != expected {
                        push(
                            &fx.backend_id,
                            field,
                            format!("{:.2}", expected as f64 / 100.0),
                            format!("{:.2}", got as f64 / 100.0),
                        );
                    }
                }
                None => push(
                    &fx.backend_id,
                    field,
                    format!("{printed:.2}"),
                    "undefined".into(),
                ),
            }
        }
    }
    GoldenReport {
        checked: file.fixtures.len(),
        mismatches,
    }
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{:.2}", round2(v)))
        .unwrap_or_else(|| "NA".to_string())
}

fn fmt_seconds(s: f64) -> String {
    if s >= 60.0 {
        let m = s / 60.0;
        if (m - m.round()).abs() < 1e-9 {
            format!("{m:.0} mins")
        } else {
            format!("{m:.1} mins")
        }
    } else if s >= 1.0 || s == 0.0 {
        format!("{s:.0} secs")
    } else {
        format!("{s:.1} sec")
    }
}

fn runtime_cell(r: &Runtime) -> String {
    match r.train_s {
        Some(t) => format!("train {}; test {}", fmt_seconds(t), fmt_seconds(r.test_s)),
        None => format!("no training; test {}", fmt_seconds(r.test_s)),
    }
}

/// Text table with one column per backend and the CSV
/// `backend_id,f1,test_runtime_s`.
pub fn comparison_report(results: &[EvalResult]) -> (String, String) {
    let mut rows: Vec<(String, Vec<String>)> = vec![
        (
            "Model".into(),
            results.iter().map(|r| r.backend_id.clone()).collect(),
        ),
        (
            "True Negative".into(),
            results.iter().map(|r| r.cm.tn.to_string()).collect(),
        ),
        (
            "False Positive".into(),
            results.iter().map(|r| r.cm.fp.to_string()).collect(),
        ),
        (
            "False Negative".into(),
            results.iter().map(|r| r.cm.fn_.to_string()).collect(),
        ),
        (
            "True Positive".into(),
            results.iter().map(|r| r.cm.tp.to_string()).collect(),
        ),
        (
            "Sum of Falses".into(),
            results
                .iter()
                .map(|r| r.sum_of_falses.to_string())
                .collect(),
        ),
        ("F1".into(), results.iter().map(|r| cell(r.f1)).collect()),
        (
            "Recall".into(),
            results.iter().map(|r| cell(r.recall)).collect(),
        ),
        (
            "Precision".into(),
            results.iter().map(|r| cell(r.precision)).collect(),
        ),
        (
            "Accuracy".into(),
            results.iter().map(|r| cell(r.accuracy)).collect(),
        ),
        (
            "Run time".into(),
            results.iter().map(|r| runtime_cell(&r.runtime)).collect(),
        ),
    ];
    let label_w = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .max()
        .unwrap_or(0);
    let col_w: Vec<usize> = (0..results.len())
        .map(|c| {
            rows.iter()
                .map(|(_, v)| v[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut table = String::new();
    for (label, values) in rows.iter_mut() {
        let _ = write!(table, "{label:<label_w$}");
        for (v, w) in values.iter().zip(&col_w) {
            let pad = w - v.chars().count();
            let _ = write!(table, "  {}{v}", " ".repeat(pad));
        }
        table.push('\n');
    }
    let mut csv = String::from("backend_id,f1,test_runtime_s\n");
    for r in results {
        let f1 =
            r.f1.map(|v| format!("{:.2}", round2(v)))
                .unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{}",
            csv_escape(&r.backend_id),
            f1,
            r.runtime.test_s
        );
    }
    (table, csv)
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roberta_and_logreg_columns() {
        let m = ConfusionMatrix::new(390, 38, 47, 1296).metrics().unwrap();
        assert_eq!(
            [
                round2(m.precision.unwrap()),
                round2(m.recall.unwrap()),
                round2(m.f1.unwrap()),
                round2(m.accuracy)
            ],
            [0.91, 0.89, 0.90, 0.95]
        );
        let m = ConfusionMatrix::new(292, 156, 145, 1178).metrics().unwrap();
        assert_eq!(
            [
                round2(m.precision.unwrap()),
                round2(m.recall.unwrap()),
                round2(m.f1.unwrap()),
                round2(m.accuracy)
            ],
            [0.65, 0.67, 0.66, 0.83]
        );
    }

    #[test]
    fn zero_denominators_are_undefined() {
        let m = ConfusionMatrix::new(0, 0, 5, 5).metrics().unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.f1, None);
        assert_eq!(m.accuracy, 0.5);
        assert!(matches!(
            ConfusionMatrix::default().metrics(),
            Err(EvalError::EmptyMatrix)
        ));
    }

    #[test]
    fn confusion_counts_and_symmetry() {
        let labels: HashMap<String, bool> = (0..10).map(|i| (format!("r{i}"), i < 4)).collect();
        let ids: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let exact = confusion(ids.iter().map(|id| (id.as_str(), labels[id])), &labels).unwrap();
        assert_eq!(exact, ConfusionMatrix::new(4, 0, 0, 6));
        let inverted = confusion(ids.iter().map(|id| (id.as_str(), !labels[id])), &labels).unwrap();
        assert_eq!(inverted, ConfusionMatrix::new(0, 6, 4, 0));
    }

    #[test]
    fn unlabeled_prediction_is_named() {
        let labels = HashMap::new();
        let err = confusion([("ghost", true)], &labels).unwrap_err();
        assert!(matches!(err, EvalError::Unlabeled(id) if id == "ghost"));
    }

    #[test]
    fn half_up_rounding_is_exact() {
        assert_eq!(round_half_up_hundredths(87, 100), 87);
        assert_eq!(round_half_up_hundredths(1, 8), 13); // 0.125 -> 0.13
        assert_eq!(round_half_up_hundredths(1, 3), 33);
        assert_eq!(round_half_up_hundredths(2, 3), 67);
    }

    #[test]
    fn report_shapes() {
        let a = EvalResult::new(
            "a",
            ConfusionMatrix::new(1, 1, 1, 1),
            Runtime {
                train_s: Some(4.0),
                test_s: 0.1,
            },
        );
        let b = EvalResult::new(
            "b",
            ConfusionMatrix::new(0, 0, 2, 2),
            Runtime {
                train_s: None,
                test_s: 8340.0,
            },
        );
        let (table, csv) = comparison_report(&[a, b]);
        assert!(table.contains("NA"));
        assert!(table.contains("no training; test 139 mins"));
        assert!(table.contains("train 4 secs; test 0.1 sec"));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines,
            vec!["backend_id,f1,test_runtime_s", "a,0.50,0.1", "b,,8340"]
        );
    }
}
