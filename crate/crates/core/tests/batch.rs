mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};

use crashqc_core::backend::{BackendError, Classifier, RemoteBackend};
use crashqc_core::ensemble::EnsemblePolicy;
use crashqc_core::kwfilter::IndicatorRuleSet;
use crashqc_core::llm::BackendConfig;
use crashqc_core::pipeline::{
    batch_identity, batch_state, canonical_outcomes, run_batch, BatchError, BatchInput, BatchLock,
    BatchSettings, BatchSummary,
};
use crashqc_core::stfilter::ThresholdConfig;
use crashqc_core::store::Store;

use common::world::{logreg, world, Scripted, World};

const CUES: &[&str] = &["queue", "backed up", "debris", "earlier", "prior", "slowed"];

fn run(
    w: &World,
    roster: &[Box<dyn Classifier>],
    policy: &EnsemblePolicy,
    settings: &BatchSettings,
    store: &Store,
) -> Result<BatchSummary, BatchError> {
    let thresholds = ThresholdConfig::default();
    let rules = IndicatorRuleSet::default();
    let input = BatchInput {
        records: &w.records,
        thresholds: &thresholds,
        rules: &rules,
        roster,
        policy,
        settings,
    };
    run_batch(&input, store)
}

fn unanimous() -> EnsemblePolicy {
    EnsemblePolicy::Unanimous
}

fn dead_remote() -> RemoteBackend {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    RemoteBackend::new(BackendConfig {
        backend_id: "remote".into(),
        endpoint_url: format!("http://127.0.0.1:{port}/classify"),
        model_name: "m".into(),
        max_retries: 0,
        backoff_ms: 1,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn second_run_selects_nothing_and_changes_nothing() {
    let w = world(600, 11);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let roster: Vec<Box<dyn Classifier>> = vec![
        Box::new(logreg(&w, "lr")),
        Box::new(Scripted::new("llm", CUES)),
    ];
    let first = run(&w, &roster, &unanimous(), &BatchSettings::default(), &store).unwrap();
    assert_eq!(first.records_in, 600);
    assert!(first.is_conserved(), "{first}");
    let before = canonical_outcomes(&store.read(), &first.identity);
    let queue_before = store.read().all_items().len();

    let second = run(&w, &roster, &unanimous(), &BatchSettings::default(), &store).unwrap();
    assert_eq!(second.records_in, 0);
    assert_eq!(
        second.flagged + second.auto_decided + second.filtered_out + second.errored,
        0
    );
    assert_eq!(canonical_outcomes(&store.read(), &first.identity), before);
    assert_eq!(store.read().all_items().len(), queue_before);
    assert_eq!(batch_state(&store.read(), &first.identity).runs.len(), 2);
}

#[test]
fn runs_are_deterministic_apart_from_timing() {
    let w = world(800, 5);
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let roster: Vec<Box<dyn Classifier>> = vec![
            Box::new(logreg(&w, "lr")),
            Box::new(Scripted::new("llm", CUES)),
            Box::new(Scripted::new("other", &["queue", "debris"])),
        ];
        let s = run(
            &w,
            &roster,
            &EnsemblePolicy::Majority { quorum: 2 },
            &BatchSettings::default(),
            &store,
        )
        .unwrap();
        outputs.push((
            s.canonical_json(),
            canonical_outcomes(&store.read(), &s.identity),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(!outputs[0].1.is_empty());
}

#[test]
fn conservation_holds_across_settings() {
    let w = world(500, 21);
    for (batch_size, chunk_size) in [(None, 16), (Some(37), 1), (Some(200), 7), (Some(1), 16)] {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let roster: Vec<Box<dyn Classifier>> = vec![
            Box::new(logreg(&w, "lr")),
            Box::new(Scripted::new("llm", CUES)),
        ];
        let settings = BatchSettings {
            batch_size,
            chunk_size,
            ..Default::default()
        };
        let mut total = 0;
        loop {
            let s = run(&w, &roster, &unanimous(), &settings, &store).unwrap();
            assert!(s.is_conserved(), "{s}");
            assert_eq!(
                s.records_in,
                s.auto_decided + s.flagged + s.filtered_out + s.errored
            );
            assert_eq!(s.auto_decided, s.auto_yes + s.auto_no);
            assert_eq!(s.filtered_out, s.filtered_reasons.values().sum::<usize>());
            if s.records_in == 0 {
                break;
            }
            total += s.records_in;
        }
        assert_eq!(total, 500);
        let identity = batch_identity(&roster);
        assert_eq!(store.read().processed(&identity).unwrap().len(), 500);
    }
}

#[test]
fn since_and_batch_size_select_oldest_unprocessed() {
    let w = world(300, 3);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let roster: Vec<Box<dyn Classifier>> = vec![Box::new(Scripted::new("llm", CUES))];
    let since = chrono::NaiveDate::from_ymd_opt(2021, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let settings = BatchSettings {
        since: Some(since),
        batch_size: Some(10),
        ..Default::default()
    };
    let s = run(&w, &roster, &unanimous(), &settings, &store).unwrap();
    assert_eq!(s.records_in, 10);
    let state = store.read();
    let done = state.processed(&s.identity).unwrap();
    let mut eligible: Vec<_> = w
        .records
        .iter()
        .filter(|r| r.occurred_at >= since)
        .collect();
    eligible.sort_by_key(|r| (r.occurred_at, r.record_id.clone()));
    for r in &eligible[..10] {
        assert!(done.contains_key(&r.record_id));
    }
}

#[test]
fn crash_mid_batch_recovers_without_loss_or_repeat() {
    let w = world(1500, 8);
    let dir = tempfile::tempdir().unwrap();
    let mut armed = Scripted::new("llm", CUES);
    armed.panic_on_call = Some(40);
    let counter = armed.share();
    let settings = BatchSettings {
        chunk_size: 16,
        ..Default::default()
    };

    let crashed = catch_unwind(AssertUnwindSafe(|| {
        let store = Store::open(dir.path()).unwrap();
        let roster: Vec<Box<dyn Classifier>> = vec![Box::new(logreg(&w, "lr")), Box::new(armed)];
        run(&w, &roster, &unanimous(), &settings, &store)
    }));
    assert!(
        crashed.is_err(),
        "the armed backend should have crashed the run"
    );
    let completed_before_crash = counter.completions();
    assert!(completed_before_crash > 0);

    // restart: a fresh handle on the same directory and the same backend
    let store = Store::open(dir.path()).unwrap();
    let roster: Vec<Box<dyn Classifier>> =
        vec![Box::new(logreg(&w, "lr")), Box::new(counter.share())];
    let identity = batch_identity(&roster);
    let partial = store.read().processed(&identity).map_or(0, |m| m.len());
    assert!(partial > 0 && partial < 1500, "{partial}");

    let resumed = run(&w, &roster, &unanimous(), &settings, &store).unwrap();
    assert_eq!(resumed.records_in, 1500 - partial);
    assert!(resumed.is_conserved());
    assert!(
        resumed.backends["llm"].reused > 0,
        "cached verdicts from the crashed chunk should be reused"
    );
    assert_eq!(store.read().processed(&identity).unwrap().len(), 1500);
    // no completed call was ever repeated
    assert_eq!(counter.max_completions(), 1);

    // and the final state matches an uninterrupted run
    let clean_dir = tempfile::tempdir().unwrap();
    let clean = Store::open(clean_dir.path()).unwrap();
    let fresh: Vec<Box<dyn Classifier>> = vec![
        Box::new(logreg(&w, "lr")),
        Box::new(Scripted::new("llm", CUES)),
    ];
    run(&w, &fresh, &unanimous(), &settings, &clean).unwrap();
    assert_eq!(
        canonical_outcomes(&store.read(), &identity),
        canonical_outcomes(&clean.read(), &identity)
    );
    let review = |s: &Store| {
        let st = s.read();
        let mut ids: Vec<String> = st.all_items().iter().map(|i| i.record_id.clone()).collect();
        ids.sort();
        ids
    };
    assert_eq!(review(&store), review(&clean));
}

#[test]
fn unreachable_backend_leaves_candidates_for_later() {
    let w = world(400, 13);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let broken: Vec<Box<dyn Classifier>> = vec![
        Box::new(Scripted::new("llm", CUES)),
        Box::new(dead_remote()),
    ];
    let s = run(&w, &broken, &unanimous(), &BatchSettings::default(), &store).unwrap();
    assert!(s.is_conserved());
    assert_eq!(s.errored, s.passed_kwfilter);
    assert!(s.errored > 0);
    assert_eq!(s.auto_decided + s.flagged, 0);
    assert_eq!(s.backends["remote"].errors, s.errored);
    let identity = batch_identity(&broken);
    assert_eq!(
        store.read().processed(&identity).unwrap().len(),
        s.filtered_out
    );
    assert!(store.read().all_items().is_empty());

    // the LLM answers were cached, so the retry only needs the remote side
    let again = run(&w, &broken, &unanimous(), &BatchSettings::default(), &store).unwrap();
    assert_eq!(again.records_in, s.errored);
    assert_eq!(again.backends["llm"].reused, s.errored);
    assert_eq!(again.backends["llm"].classified, 0);
}

#[test]
fn parse_and_model_errors_are_flagged_not_dropped() {
    struct Garbled;
    impl Classifier for Garbled {
        fn backend_id(&self) -> &str {
            "garbled"
        }
        fn kind(&self) -> crashqc_core::backend::BackendKind {
            crashqc_core::backend::BackendKind::PromptLLM
        }
        fn fingerprint(&self) -> String {
            "garbled".into()
        }
        fn classify(
            &self,
            r: &crashqc_core::corpus::CrashRecord,
        ) -> Result<crashqc_core::llm::Verdict, BackendError> {
            let e = BackendError::new(
                "garbled",
                crashqc_core::backend::ErrorCategory::Parse,
                "no JSON object",
            );
            Err(BackendError {
                raw_response: Some(format!("babble about {}", r.record_id)),
                ..e
            })
        }
    }
    let w = world(300, 17);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let roster: Vec<Box<dyn Classifier>> =
        vec![Box::new(Scripted::new("llm", CUES)), Box::new(Garbled)];
    let s = run(&w, &roster, &unanimous(), &BatchSettings::default(), &store).unwrap();
    assert_eq!(s.flagged, s.passed_kwfilter);
    assert_eq!(s.errored, 0);
    assert_eq!(store.read().all_items().len(), s.flagged);
}

#[test]
fn concurrent_batch_is_refused() {
    let w = world(50, 1);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let roster: Vec<Box<dyn Classifier>> = vec![Box::new(Scripted::new("llm", CUES))];
    let held = BatchLock::acquire(dir.path()).unwrap();
    assert!(matches!(
        run(&w, &roster, &unanimous(), &BatchSettings::default(), &store),
        Err(BatchError::Locked(_))
    ));
    drop(held);
    run(&w, &roster, &unanimous(), &BatchSettings::default(), &store).unwrap();
}

#[test]
fn roster_change_is_a_new_identity() {
    let w = world(200, 2);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let a: Vec<Box<dyn Classifier>> = vec![Box::new(Scripted::new("llm", CUES))];
    let b: Vec<Box<dyn Classifier>> = vec![Box::new(Scripted::new("llm", &["queue"]))];
    assert_ne!(batch_identity(&a), batch_identity(&b));
    run(&w, &a, &unanimous(), &BatchSettings::default(), &store).unwrap();
    let s = run(&w, &b, &unanimous(), &BatchSettings::default(), &store).unwrap();
    assert_eq!(s.records_in, 200);
}

#[test]
fn reprocess_redecides_everything() {
    let w = world(200, 4);
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let roster: Vec<Box<dyn Classifier>> = vec![Box::new(Scripted::new("llm", CUES))];
    let first = run(&w, &roster, &unanimous(), &BatchSettings::default(), &store).unwrap();
    let settings = BatchSettings {
        reprocess: true,
        ..Default::default()
    };
    let again = run(&w, &roster, &unanimous(), &settings, &store).unwrap();
    assert_eq!(again.records_in, 200);
    assert_eq!(
        (again.flagged, again.auto_decided, again.filtered_out),
        (first.flagged, first.auto_decided, first.filtered_out)
    );
}
