use crashqc_core::evalkit::{
    comparison_report, round_half_up_hundredths, validate_golden, ConfusionMatrix, GoldenFile,
};

/// Half-up rounding of n/d to hundredths with plain integer arithmetic,
/// written independently of the library.
fn oracle_round(n: u64, d: u64) -> u64 {
    let scaled = n * 100;
    let (q, r) = (scaled / d, scaled % d);
    if 2 * r >= d {
        q + 1
    } else {
        q
    }
}

fn printed(cm: &ConfusionMatrix) -> [u64; 4] {
    let (tp, fp, fn_, tn) = (cm.tp, cm.fp, cm.fn_, cm.tn);
    [
        oracle_round(tp, tp + fp),
        oracle_round(tp, tp + fn_),
        oracle_round(2 * tp, 2 * tp + fp + fn_),
        oracle_round(tp + tn, tp + tn + fp + fn_),
    ]
}

#[test]
fn shipped_fixtures_validate() {
    let file = GoldenFile::shipped();
    let report = validate_golden(&file);
    assert!(report.passed(), "{:?}", report.mismatches);
    assert_eq!(report.checked, 14);
    assert_eq!(
        file.fixtures
            .iter()
            .filter(|f| f.table == "model_comparison")
            .count(),
        10
    );
    assert_eq!(
        file.fixtures
            .iter()
            .filter(|f| f.table == "model_scale")
            .count(),
        4
    );
    for f in &file.fixtures {
        assert_eq!(f.tn + f.fp + f.fn_ + f.tp, 1771, "{}", f.backend_id);
    }
}

#[test]
fn fixtures_agree_with_an_independent_rounding_oracle() {
    for f in GoldenFile::shipped().fixtures {
        let want = [
            f.printed.precision,
            f.printed.recall,
            f.printed.f1,
            f.printed.accuracy,
        ]
        .map(|x| (x * 100.0).round() as u64);
        assert_eq!(printed(&f.cm()), want, "{}", f.backend_id);
    }
}

#[test]
fn headline_values() {
    let file = GoldenFile::shipped();
    let get = |id: &str| {
        file.fixtures
            .iter()
            .find(|f| f.backend_id == id)
            .unwrap()
            .cm()
    };
    // precision, recall, F1, accuracy
    assert_eq!(printed(&get("RoBERTa")), [91, 89, 90, 95]);
    assert_eq!(printed(&get("Logistic Regression")), [65, 67, 66, 83]);
    assert_eq!(printed(&get("Gemma3:27B"))[1], 94);
    assert_eq!(printed(&get("LLaMA3:8B"))[2], 71);
}

#[test]
fn library_rounding_matches_oracle_exhaustively() {
    for d in 1..=400u64 {
        for n in 0..=d {
            assert_eq!(
                round_half_up_hundredths(n, d),
                oracle_round(n, d),
                "{n}/{d}"
            );
        }
    }
    // exact ties go up
    assert_eq!(round_half_up_hundredths(1, 8), 13);
    assert_eq!(round_half_up_hundredths(1, 200), 1);
    assert_eq!(round_half_up_hundredths(3, 8), 38);
}

#[test]
fn a_single_transcription_error_is_caught() {
    let mut file = GoldenFile::shipped();
    file.fixtures[0].fp += 1;
    file.fixtures[0].tn -= 1;
    let report = validate_golden(&file);
    assert!(!report.passed());
    assert!(report.mismatches.iter().any(|m| m.field == "sum_of_falses"));

    let mut file = GoldenFile::shipped();
    file.fixtures[3].printed.f1 = 0.80;
    let report = validate_golden(&file);
    assert_eq!(report.mismatches.len(), 1);
    assert_eq!(
        (
            report.mismatches[0].expected.as_str(),
            report.mismatches[0].computed.as_str()
        ),
        ("0.80", "0.79")
    );

    let mut file = GoldenFile::shipped();
    file.fixtures[5].tp += 1;
    assert!(validate_golden(&file)
        .mismatches
        .iter()
        .any(|m| m.field == "total"));
}

#[test]
fn comparison_report_lists_every_model() {
    let results = GoldenFile::shipped().unique_results();
    assert_eq!(results.len(), 12);
    let (table, _) = comparison_report(&results);
    for id in [
        "RoBERTa",
        "Logistic Regression",
        "LLaMA3:8B",
        "DeepSeek-R1:32B",
    ] {
        assert!(table.contains(id), "{id}");
    }
}

#[test]
fn undefined_metrics_are_reported_not_invented() {
    let cm = ConfusionMatrix::new(0, 0, 5, 10);
    assert_eq!(cm.precision(), None);
    assert_eq!(cm.recall(), Some(0.0));
    let m = cm.metrics().unwrap();
    assert_eq!((m.precision, m.f1), (None, None));
    assert!(ConfusionMatrix::default().metrics().is_err());
}
