//! End-to-end tests for the HTTP backend against scripted local servers, plus
//! mock-backend behavior.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::Router;
use radlabel_core::prompt::{ChatMessage, PromptBundle, PromptPayload, WireMode};
use radlabel_client::{Backend, ClientError, EndpointConfig, HttpBackend, MockBackend};

#[derive(Clone, Default)]
struct Recorded {
    bodies: Arc<Mutex<Vec<String>>>,
    auth_headers: Arc<Mutex<Vec<Option<String>>>>,
    hits: Arc<AtomicUsize>,
}

impl Recorded {
    fn record(&self, headers: &HeaderMap, body: &str) -> usize {
        self.bodies.lock().unwrap().push(body.to_string());
        self.auth_headers.lock().unwrap().push(
            headers
                .get("authorization")
                .map(|v| v.to_str().unwrap().to_string()),
        );
        self.hits.fetch_add(1, Ordering::SeqCst)
    }
}

async fn spawn(app: Router) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    addr
}

fn chat_success_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

fn completion_success_body(text: &str) -> String {
    serde_json::json!({
        "choices": [{"text": text, "finish_reason": "length"}]
    })
    .to_string()
}

fn config_for(addr: SocketAddr, wire_mode: WireMode) -> EndpointConfig {
    EndpointConfig::from_json(&format!(
        r#"{{"base_url": "http://{addr}/v1", "model_name": "test-model",
             "wire_mode": "{}", "backoff": {{"initial_ms": 1, "multiplier": 1.0}}}}"#,
        match wire_mode {
            WireMode::Chat => "chat",
            WireMode::Completion => "completion",
        }
    ))
    .unwrap()
}

fn chat_bundle(report_id: &str, user_text: &str) -> PromptBundle {
    PromptBundle {
        report_id: report_id.to_string(),
        payload: PromptPayload::Chat(vec![
            ChatMessage {
                role: "system".to_string(),
                content: "Label the findings.".to_string(),
            },
            ChatMessage {
                role: "user".to_string(),
                content: user_text.to_string(),
            },
        ]),
        token_estimate: 16,
        template_hash: "testhash".to_string(),
    }
}

fn completion_bundle(report_id: &str, prompt: &str) -> PromptBundle {
    PromptBundle {
        report_id: report_id.to_string(),
        payload: PromptPayload::Completion(prompt.to_string()),
        token_estimate: 16,
        template_hash: "testhash".to_string(),
    }
}

#[tokio::test]
async fn chat_request_carries_params_messages_and_bearer_auth() {
    let recorded = Recorded::default();
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(
                |State(rec): State<Recorded>, headers: HeaderMap, body: String| async move {
                    rec.record(&headers, &body);
                    chat_success_body(r#"{"atelectasis": "no"}"#)
                },
            ),
        )
        .with_state(recorded.clone());
    let addr = spawn(app).await;

    std::env::set_var("RADLABEL_TEST_BEARER_KEY", "sekrit-value-123");
    let mut config = config_for(addr, WireMode::Chat);
    config.auth_env_var = Some("RADLABEL_TEST_BEARER_KEY".to_string());
    let backend = HttpBackend::new(config).unwrap();

    let response = backend
        .generate(&chat_bundle("r1", "Lungs are clear."))
        .await
        .unwrap();
    assert_eq!(response.raw_text, r#"{"atelectasis": "no"}"#);
    assert_eq!(response.finish_reason, "stop");
    assert_eq!(response.attempt_count, 1);

    let bodies = recorded.bodies.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["top_p"], 0.95);
    assert_eq!(body["frequency_penalty"], 0.0);
    assert_eq!(body["presence_penalty"], 0.0);
    assert_eq!(body["max_tokens"], 1024);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["content"], "Lungs are clear.");
    assert!(body.get("prompt").is_none());

    let auth = recorded.auth_headers.lock().unwrap();
    assert_eq!(auth[0].as_deref(), Some("Bearer sekrit-value-123"));
}

#[tokio::test]
async fn completion_request_uses_prompt_field_and_text_choice() {
    let recorded = Recorded::default();
    let app = Router::new()
        .route(
            "/v1/completions",
            post(
                |State(rec): State<Recorded>, headers: HeaderMap, body: String| async move {
                    rec.record(&headers, &body);
                    completion_success_body(r#"{"pneumonia": "yes"}"#)
                },
            ),
        )
        .with_state(recorded.clone());
    let addr = spawn(app).await;

    let backend = HttpBackend::new(config_for(addr, WireMode::Completion)).unwrap();
    let response = backend
        .generate(&completion_bundle("r2", "Report: ...\nLabels:"))
        .await
        .unwrap();
    assert_eq!(response.raw_text, r#"{"pneumonia": "yes"}"#);
    assert_eq!(response.finish_reason, "length");

    let bodies = recorded.bodies.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(body["prompt"], "Report: ...\nLabels:");
    assert!(body.get("messages").is_none());
    // no auth configured, no auth header sent
    assert_eq!(recorded.auth_headers.lock().unwrap()[0], None);
}

#[tokio::test]
async fn retryable_statuses_are_retried_with_identical_bodies() {
    let recorded = Recorded::default();
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(
                |State(rec): State<Recorded>, headers: HeaderMap, body: String| async move {
                    let hit = rec.record(&headers, &body);
                    if hit < 2 {
                        (StatusCode::TOO_MANY_REQUESTS, "slow down".to_string())
                    } else {
                        (StatusCode::OK, chat_success_body("{}"))
                    }
                },
            ),
        )
        .with_state(recorded.clone());
    let addr = spawn(app).await;

    let backend = HttpBackend::new(config_for(addr, WireMode::Chat)).unwrap();
    let response = backend.generate(&chat_bundle("r3", "text")).await.unwrap();
    assert_eq!(response.attempt_count, 3);

    let bodies = recorded.bodies.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    assert_eq!(bodies[0], bodies[1], "retried bytes must be identical");
    assert_eq!(bodies[1], bodies[2], "retried bytes must be identical");
}

#[tokio::test]
async fn persistent_server_errors_exhaust_retries() {
    let recorded = Recorded::default();
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(
                |State(rec): State<Recorded>, headers: HeaderMap, body: String| async move {
                    rec.record(&headers, &body);
                    (StatusCode::INTERNAL_SERVER_ERROR, "boom")
                },
            ),
        )
        .with_state(recorded.clone());
    let addr = spawn(app).await;

    let backend = HttpBackend::new(config_for(addr, WireMode::Chat)).unwrap();
    let err = backend
        .generate(&chat_bundle("r4", "text"))
        .await
        .unwrap_err();
    match err {
        ClientError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 4, "default max_retries 3 means 4 attempts");
            assert!(last.contains("500"), "last error: {last}");
        }
        other => panic!("expected RetriesExhausted, got {other:?}"),
    }
    assert_eq!(recorded.hits.load(Ordering::SeqCst), 4);
}

#[tokio::test]
async fn client_errors_are_rejected_without_retry() {
    let recorded = Recorded::default();
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(
                |State(rec): State<Recorded>, headers: HeaderMap, body: String| async move {
                    rec.record(&headers, &body);
                    (StatusCode::BAD_REQUEST, "malformed request")
                },
            ),
        )
        .with_state(recorded.clone());
    let addr = spawn(app).await;

    let backend = HttpBackend::new(config_for(addr, WireMode::Chat)).unwrap();
    let err = backend
        .generate(&chat_bundle("r5", "text"))
        .await
        .unwrap_err();
    match err {
        ClientError::Rejected { status, body } => {
            assert_eq!(status, 400);
            assert_eq!(body, "malformed request");
        }
        other => panic!("expected Rejected, got {other:?}"),
    }
    assert_eq!(recorded.hits.load(Ordering::SeqCst), 1, "no retry on 4xx");
}

#[tokio::test]
async fn wire_mode_mismatch_fails_before_any_request() {
    let recorded = Recorded::default();
    let app = Router::new()
        .route(
            "/v1/completions",
            post(
                |State(rec): State<Recorded>, headers: HeaderMap, body: String| async move {
                    rec.record(&headers, &body);
                    completion_success_body("{}")
                },
            ),
        )
        .with_state(recorded.clone());
    let addr = spawn(app).await;

    let backend = HttpBackend::new(config_for(addr, WireMode::Completion)).unwrap();
    let err = backend
        .generate(&chat_bundle("r6", "text"))
        .await
        .unwrap_err();
    assert!(matches!(
        err,
        ClientError::ModeMismatch {
            expected: WireMode::Completion,
            got: WireMode::Chat,
        }
    ));
    assert_eq!(recorded.hits.load(Ordering::SeqCst), 0);
}

#[tokio::test]
async fn missing_auth_variable_fails_at_construction() {
    let mut config = EndpointConfig::from_json(
        r#"{"base_url": "http://127.0.0.1:1/v1", "model_name": "m", "wire_mode": "chat"}"#,
    )
    .unwrap();
    config.auth_env_var = Some("RADLABEL_TEST_DEFINITELY_UNSET_VAR".to_string());
    let err = HttpBackend::new(config).map(|_| ()).unwrap_err();
    match err {
        ClientError::AuthMissing { env_var } => {
            assert_eq!(env_var, "RADLABEL_TEST_DEFINITELY_UNSET_VAR");
        }
        other => panic!("expected AuthMissing, got {other:?}"),
    }
}

#[tokio::test]
async fn connection_failures_surface_as_exhausted_transport_errors() {
    // bind then drop a listener so the port is very likely closed
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);

    let mut config = config_for(addr, WireMode::Chat);
    config.max_retries = 1;
    let backend = HttpBackend::new(config).unwrap();
    let err = backend
        .generate(&chat_bundle("r7", "text"))
        .await
        .unwrap_err();
    match err {
        ClientError::RetriesExhausted { attempts, last } => {
            assert_eq!(attempts, 2);
            assert!(last.starts_with("transport:"), "last error: {last}");
        }
        other => panic!("expected RetriesExhausted, got {other:?}"),
    }
}

/// Log capture plumbing for the privacy test.
#[derive(Clone, Default)]
struct CaptureWriter(Arc<Mutex<Vec<u8>>>);

impl std::io::Write for CaptureWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl<'a> tracing_subscriber::fmt::MakeWriter<'a> for CaptureWriter {
    type Writer = CaptureWriter;
    fn make_writer(&'a self) -> Self::Writer {
        self.clone()
    }
}

#[tokio::test]
async fn logs_never_contain_report_or_prompt_text() {
    let recorded = Recorded::default();
    let app = Router::new()
        .route(
            "/v1/chat/completions",
            post(
                |State(rec): State<Recorded>, headers: HeaderMap, body: String| async move {
                    let hit = rec.record(&headers, &body);
                    if hit == 0 {
                        (StatusCode::TOO_MANY_REQUESTS, "slow".to_string())
                    } else {
                        (StatusCode::OK, chat_success_body("{}"))
                    }
                },
            ),
        )
        .with_state(recorded.clone());
    let addr = spawn(app).await;

    let capture = CaptureWriter::default();
    let subscriber = tracing_subscriber::fmt()
        .with_max_level(tracing::level_filters::LevelFilter::TRACE)
        .with_writer(capture.clone())
        .finish();
    let guard = tracing::subscriber::set_default(subscriber);

    let sentinel = "PATIENT-SENTINEL shows basal opacity and effusion";
    let backend = HttpBackend::new(config_for(addr, WireMode::Chat)).unwrap();
    backend
        .generate(&chat_bundle("report-77", sentinel))
        .await
        .unwrap();
    drop(guard);

    let logs = String::from_utf8(capture.0.lock().unwrap().clone()).unwrap();
    assert!(!logs.is_empty(), "expected some debug logs to be captured");
    assert!(
        !logs.contains("PATIENT-SENTINEL"),
        "report text leaked into logs:\n{logs}"
    );
    assert!(
        !logs.contains("Label the findings"),
        "prompt text leaked into logs:\n{logs}"
    );
    assert!(logs.contains("report-77"), "ids are fine to log");
}

#[tokio::test]
async fn mock_backend_replays_scripts_and_defaults() {
    let script: std::collections::BTreeMap<String, String> =
        [("r1".to_string(), r#"{"pneumonia": "yes"}"#.to_string())].into();
    let mock = MockBackend::new(script);

    let scripted = mock.generate(&chat_bundle("r1", "a")).await.unwrap();
    assert_eq!(scripted.raw_text, r#"{"pneumonia": "yes"}"#);
    assert_eq!(scripted.attempt_count, 1);

    let fallback = mock.generate(&chat_bundle("unknown", "b")).await.unwrap();
    assert_eq!(fallback.raw_text, "{}");

    // deterministic across calls
    let again = mock.generate(&chat_bundle("r1", "a")).await.unwrap();
    assert_eq!(again, scripted);
}

#[tokio::test]
async fn mock_backend_loads_script_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("script.json");
    std::fs::write(
        &path,
        r#"{"responses": {"r9": "{\"pneumothorax\": \"yes\"}"}, "default": "fallback"}"#,
    )
    .unwrap();
    let mock = MockBackend::from_file(&path).unwrap();
    let hit = mock.generate(&chat_bundle("r9", "x")).await.unwrap();
    assert_eq!(hit.raw_text, r#"{"pneumothorax": "yes"}"#);
    let miss = mock.generate(&chat_bundle("r0", "x")).await.unwrap();
    assert_eq!(miss.raw_text, "fallback");
}
