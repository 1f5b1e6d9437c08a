use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use forge_cli::service::{router, AppState, SessionResource};
use forge_core::agents::{
    AgentRole, BackendError, Capabilities, LlmBackend, LlmRequest, MockBackend, ScriptEntry, ScriptedBackend,
    TranscriptScript,
};
use forge_core::pipeline::{Deps, SessionStore, VerificationConfig};
use forge_core::render::MockRenderer;
use forge_core::schema::ApiSchema;
use forge_core::similarity::Providers;

fn deps(backend: Arc<dyn LlmBackend>) -> Deps {
    let schema = Arc::new(ApiSchema::reference());
    let mut d = Deps::new(schema, backend, Arc::new(MockRenderer));
    d.providers = Providers::mock();
    d.render.resolution = (64, 64);
    d
}

fn mock_deps() -> Deps {
    deps(Arc::new(MockBackend::new(Arc::new(ApiSchema::reference()))))
}

fn app(root: &std::path::Path, deps: Option<Deps>) -> Router {
    router(AppState::new(SessionStore::new(root).unwrap(), deps, VerificationConfig::default()))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let body = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec(), ctype)
}

fn post_json(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

async fn create(app: &Router, body: Value) -> String {
    let (status, bytes, _) = send(app, post_json("/sessions", body)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&bytes));
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    v["id"].as_str().unwrap().to_string()
}

async fn resource(app: &Router, id: &str) -> SessionResource {
    let (status, bytes, _) = send(app, get(&format!("/sessions/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&bytes).unwrap()
}

async fn settle(app: &Router, id: &str) -> SessionResource {
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let r = resource(app, id).await;
        if r.status.to_string() != "running" {
            return r;
        }
        assert!(Instant::now() < deadline, "session {id} did not settle");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

trait StatusName {
    fn to_string(&self) -> String;
}

impl StatusName for forge_core::pipeline::SessionStatus {
    fn to_string(&self) -> String {
        serde_json::to_value(self).unwrap().as_str().unwrap().to_string()
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn text_session_runs_to_acceptance_and_serves_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), Some(mock_deps()));
    let id = create(&app, json!({ "text": "A basketball player" })).await;
    let r = settle(&app, &id).await;
    assert_eq!(r.status.to_string(), "accepted");
    assert!(!r.iterations.is_empty());
    assert_eq!(r.iterations.last().unwrap().decision.map(|d| format!("{d:?}")), Some("Accept".into()));
    assert!(!r.pending_edit);

    let link = r.iterations[0].renders.values().next().unwrap().clone();
    let (status, bytes, ctype) = send(&app, get(&link)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert!(bytes.starts_with(b"\x89PNG"));

    let (status, bytes, _) = send(&app, get(&r.iterations[0].snippet)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(bytes).unwrap().contains("Human.from_preset"));

    let (status, bytes, ctype) = send(&app, get(&format!("/sessions/{id}/log"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("application/x-ndjson"));
    let steps: Vec<String> = String::from_utf8(bytes)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(steps.first().map(String::as_str), Some("create"));
    assert!(steps.iter().any(|s| s == "gate"));
}

#[tokio::test(flavor = "multi_thread")]
async fn missing_things_are_404() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), Some(mock_deps()));
    assert_eq!(send(&app, get("/sessions/nope")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, get("/sessions/..%2Fetc")).await.0, StatusCode::NOT_FOUND);
    let id = create(&app, json!({ "text": "A basketball player" })).await;
    settle(&app, &id).await;
    for uri in [
        format!("/sessions/{id}/iterations/99/render/portrait"),
        format!("/sessions/{id}/iterations/1/render/side"),
        format!("/sessions/{id}/iterations/99/snippet"),
        "/sessions/nope/log".to_string(),
    ] {
        assert_eq!(send(&app, get(&uri)).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    assert_eq!(send(&app, get(&format!("/sessions/{id}/iterations/1/render/portrait.png"))).await.0, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread")]
async fn creation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), Some(mock_deps()));
    assert_eq!(send(&app, post_json("/sessions", json!({}))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, post_json("/sessions", json!({ "text": "  " }))).await.0, StatusCode::BAD_REQUEST);
    let bad_json = Request::post("/sessions").body(Body::from("{not json")).unwrap();
    assert_eq!(send(&app, bad_json).await.0, StatusCode::BAD_REQUEST);
    let tau = send(&app, post_json("/sessions", json!({ "text": "x", "tau": 1.5 }))).await;
    assert_eq!(tau.0, StatusCode::UNPROCESSABLE_ENTITY);
    let v: Value = serde_json::from_slice(&tau.1).unwrap();
    assert!(v["error"].as_str().unwrap().contains("1.5"));
    let zero = send(&app, post_json("/sessions", json!({ "text": "x", "max_iterations": 0 }))).await;
    assert_eq!(zero.0, StatusCode::UNPROCESSABLE_ENTITY);

    let unconfigured = self::app(tmp.path(), None);
    let r = send(&unconfigured, post_json("/sessions", json!({ "text": "x" }))).await;
    assert_eq!(r.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(send(&unconfigured, post_json("/sessions", json!({}))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn multipart_creation_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), Some(mock_deps()));
    let boundary = "XforgeX";
    let body = format!(
        "--{b}\r\nContent-Disposition: form-data; name=\"text\"\r\n\r\nA basketball player\r\n\
         --{b}\r\nContent-Disposition: form-data; name=\"refine_enabled\"\r\n\r\nfalse\r\n--{b}--\r\n",
        b = boundary
    );
    let req = Request::post("/sessions")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let (status, bytes, _) = send(&app, req).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&bytes));
    let id = serde_json::from_slice::<Value>(&bytes).unwrap()["id"].as_str().unwrap().to_string();
    let r = settle(&app, &id).await;
    assert_eq!(r.iterations.len(), 1);
    let state = tmp.path().join("sessions").join(&id).join("state.json");
    let state: Value = serde_json::from_slice(&std::fs::read(state).unwrap()).unwrap();
    assert_eq!(state["config"]["refine_enabled"], false);

    let tau = format!(
        "--{b}\r\nContent-Disposition: form-data; name=\"text\"\r\n\r\nx\r\n\
         --{b}\r\nContent-Disposition: form-data; name=\"tau\"\r\n\r\n1.5\r\n--{b}--\r\n",
        b = boundary
    );
    let req = Request::post("/sessions")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(tau))
        .unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn scripted_three_iterations_summarized_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let entries = [50, 70, 95]
        .iter()
        .enumerate()
        .map(|(i, p)| ScriptEntry::new(AgentRole::Evaluator, format!("SCORE: {p}")).at(i as u32 + 1))
        .collect();
    let schema = Arc::new(ApiSchema::reference());
    let backend =
        ScriptedBackend::new(TranscriptScript::new(entries)).with_fallback(Arc::new(MockBackend::new(schema)));
    let app = app(tmp.path(), Some(deps(Arc::new(backend))));
    let id = create(&app, json!({ "text": "A basketball player" })).await;
    let r = settle(&app, &id).await;
    let summary: Vec<(u32, Option<f64>, String)> = r
        .iterations
        .iter()
        .map(|it| (it.i, it.s, format!("{:?}", it.decision.unwrap())))
        .collect();
    assert_eq!(
        summary,
        vec![
            (1, Some(0.5), "Refine".to_string()),
            (2, Some(0.7), "Refine".to_string()),
            (3, Some(0.95), "Accept".to_string()),
        ]
    );
    assert_eq!(r.final_iteration, Some(3));
}

/// Holds evaluator calls until released.
struct Gated {
    inner: MockBackend,
    open: Mutex<bool>,
    cv: Condvar,
}

impl Gated {
    fn release(&self) {
        *self.open.lock().unwrap() = true;
        self.cv.notify_all();
    }
}

impl LlmBackend for Gated {
    fn name(&self) -> &str {
        "gated"
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn call(&self, request: &LlmRequest) -> Result<String, BackendError> {
        if request.role == AgentRole::Evaluator {
            let mut open = self.open.lock().unwrap();
            while !*open {
                open = self.cv.wait(open).unwrap();
            }
        }
        self.inner.call(request)
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn edits_follow_the_session_lifecycle() {
    let tmp = tempfile::tempdir().unwrap();
    let gated = Arc::new(Gated {
        inner: MockBackend::new(Arc::new(ApiSchema::reference())),
        open: Mutex::new(false),
        cv: Condvar::new(),
    });
    let app = app(tmp.path(), Some(deps(gated.clone())));
    let id = create(&app, json!({ "text": "A basketball player" })).await;
    let edit = |instruction: &str| post_json(&format!("/sessions/{id}/edits"), json!({ "instruction": instruction }));

    let running = resource(&app, &id).await;
    assert_eq!(running.status.to_string(), "running");
    assert_eq!(send(&app, edit("make him older")).await.0, StatusCode::CONFLICT);
    gated.release();
    let done = settle(&app, &id).await;
    assert_eq!(done.status.to_string(), "accepted");
    let before = done.iteration;

    assert_eq!(send(&app, edit("   ")).await.0, StatusCode::BAD_REQUEST);
    let no_body = Request::post(format!("/sessions/{id}/edits")).body(Body::from("nope")).unwrap();
    assert_eq!(send(&app, no_body).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(
        send(&app, post_json("/sessions/nope/edits", json!({ "instruction": "x" }))).await.0,
        StatusCode::NOT_FOUND
    );

    let (status, _, _) = send(&app, edit("make him wear a military uniform")).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let edited = settle(&app, &id).await;
    assert_eq!(edited.status.to_string(), "accepted");
    assert!(edited.iteration > before);
    assert_eq!(edited.edits.len(), 1);
    assert_eq!(edited.edits[0].status.as_deref(), Some("accepted"));
    assert!(!edited.pending_edit);

    // A fresh process over the same store answers identically.
    let restarted = self::app(tmp.path(), Some(mock_deps()));
    let (_, a, _) = send(&app, get(&format!("/sessions/{id}"))).await;
    let (_, b, _) = send(&restarted, get(&format!("/sessions/{id}"))).await;
    assert_eq!(a, b);
}

#[tokio::test(flavor = "multi_thread")]
async fn resource_never_carries_credentials() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), Some(mock_deps()));
    let id = create(&app, json!({ "text": "A basketball player", "few_shot_k": 0 })).await;
    settle(&app, &id).await;
    let (_, bytes, _) = send(&app, get(&format!("/sessions/{id}"))).await;
    let text = String::from_utf8(bytes).unwrap().to_lowercase();
    assert!(!text.contains("api_key") && !text.contains("authorization"));
}
