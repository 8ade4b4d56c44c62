mod common;

use std::time::Duration;

use crashqc_core::backend::{Classifier, ErrorCategory, LlmBackend};
use crashqc_core::corpus::{CrashRecord, Direction, RoadwayClass};
use crashqc_core::llm::{
    build_prompt, Answer, ApiStyle, BackendConfig, LlmClient, PromptRegistry, TransportError,
};

use common::stub::{chat_completion, user_message, Reply, StubServer};

fn config(url: &str) -> BackendConfig {
    BackendConfig {
        backend_id: "stub".into(),
        endpoint_url: url.into(),
        model_name: "stub-model".into(),
        timeout_s: 5.0,
        max_retries: 2,
        backoff_ms: 10,
        ..Default::default()
    }
}

fn record(narrative: &str) -> CrashRecord {
    CrashRecord {
        record_id: "R1".into(),
        occurred_at: chrono::NaiveDate::from_ymd_opt(2022, 1, 1)
            .unwrap()
            .and_hms_opt(9, 0, 0)
            .unwrap(),
        route_id: "I-64".into(),
        milepoint: Some(10.0),
        latitude: None,
        longitude: None,
        roadway_class: RoadwayClass::AccessControlled,
        direction: Direction::E,
        coded_secondary: false,
        narrative: narrative.into(),
    }
}

fn prompt() -> crashqc_core::llm::Prompt {
    build_prompt(
        PromptRegistry::default().default_template(),
        "Unit 2 struck unit 1 in a queue.",
    )
    .unwrap()
}

#[test]
fn fixed_text_round_trip() {
    let server = StubServer::start(|_, _| Reply::ok(chat_completion("hello there")));
    let client = LlmClient::new(config(&format!("{}/v1/chat/completions", server.url))).unwrap();
    let raw = client.classify_remote(&prompt()).unwrap();
    assert_eq!(raw.text, "hello there");
    assert!(raw.latency > Duration::ZERO);
    assert_eq!(raw.attempts, 1);
}

#[test]
fn request_is_chat_completions_at_temperature_zero() {
    let server = StubServer::start(|_, req| {
        let v = req.json();
        assert_eq!(req.method, "POST");
        assert_eq!(req.path, "/v1/chat/completions");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["model"], "stub-model");
        assert_eq!(v["messages"][0]["role"], "system");
        Reply::ok(chat_completion(&user_message(req)))
    });
    let client = LlmClient::new(config(&format!("{}/v1/chat/completions", server.url))).unwrap();
    // echo proves the narrative went out verbatim as the user message
    assert_eq!(
        client.classify_remote(&prompt()).unwrap().text,
        "Unit 2 struck unit 1 in a queue."
    );
}

#[test]
fn two_server_errors_then_success() {
    let server = StubServer::start(|i, _| {
        if i < 2 {
            Reply::status(500, "{\"error\":\"overloaded\"}")
        } else {
            Reply::ok(chat_completion("third time"))
        }
    });
    let client = LlmClient::new(config(&server.url)).unwrap();
    let raw = client.classify_remote(&prompt()).unwrap();
    assert_eq!(raw.text, "third time");
    assert_eq!(raw.attempts, 3);
    assert_eq!(server.hits(), 3);
}

#[test]
fn persistent_server_errors_exhaust_retries() {
    let server = StubServer::start(|_, _| Reply::status(503, "busy"));
    let client = LlmClient::new(config(&server.url)).unwrap();
    match client.classify_remote(&prompt()) {
        Err(TransportError::RetriesExhausted { attempts, last }) => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, TransportError::Status { code: 503, .. }));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.hits(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = StubServer::start(|_, _| Reply::status(404, "no such model"));
    let client = LlmClient::new(config(&server.url)).unwrap();
    assert!(matches!(
        client.classify_remote(&prompt()),
        Err(TransportError::Status { code: 404, .. })
    ));
    assert_eq!(server.hits(), 1);
}

#[test]
fn unreachable_endpoint_reports_attempts() {
    // bind then drop to get a port with nobody listening
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let client = LlmClient::new(config(&format!(
        "http://127.0.0.1:{port}/v1/chat/completions"
    )))
    .unwrap();
    match client.classify_remote(&prompt()) {
        Err(TransportError::RetriesExhausted { attempts, last }) => {
            assert_eq!(attempts, 3);
            assert!(matches!(*last, TransportError::Connect(_)), "{last:?}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn slow_server_times_out() {
    let server = StubServer::start(|_, _| {
        std::thread::sleep(Duration::from_millis(600));
        Reply::ok(chat_completion("late"))
    });
    let cfg = BackendConfig {
        timeout_s: 0.2,
        max_retries: 0,
        ..config(&server.url)
    };
    let client = LlmClient::new(cfg).unwrap();
    match client.classify_remote(&prompt()) {
        Err(TransportError::RetriesExhausted { attempts: 1, last }) => {
            assert!(matches!(*last, TransportError::Timeout { .. }), "{last:?}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn generate_style_reads_response_field() {
    let server = StubServer::start(|_, req| {
        let v = req.json();
        assert!(v["prompt"].as_str().unwrap().contains("Narrative:"));
        Reply::ok(serde_json::json!({"response": "{\"answer\":\"NO\",\"probability\":0.2,\"explanation\":\"e\"}"}).to_string())
    });
    let cfg = BackendConfig {
        api: ApiStyle::Generate,
        ..config(&server.url)
    };
    let backend =
        LlmBackend::new(cfg, PromptRegistry::default().default_template().clone()).unwrap();
    let v = backend.classify(&record("deer strike")).unwrap();
    assert_eq!(v.answer, Answer::No);
}

#[test]
fn llm_backend_records_prompt_version_and_latency() {
    let server = StubServer::start(|_, _| {
        std::thread::sleep(Duration::from_millis(60));
        Reply::ok(chat_completion(
            "Let me think... {\"answer\":\" no \",\"probability\":0.55,\"explanation\":\"No causal link stated.\"}",
        ))
    });
    let reg = PromptRegistry::default();
    let backend = LlmBackend::new(config(&server.url), reg.get("v2").unwrap().clone()).unwrap();
    let v = backend.classify(&record("Unit 1 struck unit 2.")).unwrap();
    assert_eq!(v.answer, Answer::No);
    assert_eq!(v.probability, 0.55);
    assert_eq!(v.prompt_version, "v2");
    assert!(
        v.latency_ms >= 60 && v.latency_ms < 2000,
        "{}",
        v.latency_ms
    );
    assert!(v.raw_response.starts_with("Let me think"));
}

#[test]
fn unparseable_reply_is_a_parse_error_with_raw_text() {
    let server = StubServer::start(|_, _| Reply::ok(chat_completion("I am not sure.")));
    let backend = LlmBackend::new(
        config(&server.url),
        PromptRegistry::default().default_template().clone(),
    )
    .unwrap();
    let e = backend.classify(&record("text")).unwrap_err();
    assert_eq!(e.category, ErrorCategory::Parse);
    assert_eq!(e.raw_response.as_deref(), Some("I am not sure."));
}

#[test]
fn transport_failure_maps_to_transport_category() {
    let server = StubServer::start(|_, _| Reply::status(500, "x"));
    let cfg = BackendConfig {
        max_retries: 0,
        ..config(&server.url)
    };
    let backend =
        LlmBackend::new(cfg, PromptRegistry::default().default_template().clone()).unwrap();
    assert_eq!(
        backend.classify(&record("text")).unwrap_err().category,
        ErrorCategory::Transport
    );
}

#[test]
fn empty_narrative_is_a_model_error_without_a_request() {
    let server = StubServer::start(|_, _| Reply::ok(chat_completion("{}")));
    let backend = LlmBackend::new(
        config(&server.url),
        PromptRegistry::default().default_template().clone(),
    )
    .unwrap();
    assert_eq!(
        backend.classify(&record("  ")).unwrap_err().category,
        ErrorCategory::Model
    );
    assert_eq!(server.hits(), 0);
}

#[test]
fn audit_log_records_every_call_and_its_outcome() {
    use crashqc_core::llm::AuditLog;
    let server = StubServer::start(|i, _| match i {
        0 => Reply::ok(chat_completion(
            "{\"answer\":\"YES\",\"probability\":0.9,\"explanation\":\"queue\"}",
        )),
        1 => Reply::ok(chat_completion("no idea")),
        _ => Reply::status(500, "down"),
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("logs/audit.jsonl");
    let log = std::sync::Arc::new(AuditLog::open(&path).unwrap());
    let cfg = BackendConfig {
        max_retries: 0,
        ..config(&server.url)
    };
    let backend = LlmBackend::new(cfg, PromptRegistry::default().get("v1").unwrap().clone())
        .unwrap()
        .with_audit_log(log);
    for id in ["A", "B", "C"] {
        let _ = backend.classify(&CrashRecord {
            record_id: id.into(),
            ..record("queue")
        });
    }
    let entries = AuditLog::read(&path).unwrap();
    assert_eq!(entries.len(), 3);
    assert_eq!(
        entries
            .iter()
            .map(|e| e.record_id.as_str())
            .collect::<Vec<_>>(),
        ["A", "B", "C"]
    );
    assert!(entries.iter().all(|e| e.prompt_version == "v1"));
    assert_eq!(entries[0].outcome, "ok");
    assert!(entries[0].latency_ms.unwrap() >= 1);
    assert!(entries[1].outcome.starts_with("Parse"));
    assert_eq!(entries[1].raw_response.as_deref(), Some("no idea"));
    assert!(entries[2].outcome.starts_with("Transport"));
    assert_eq!(entries[2].raw_response, None);
}
