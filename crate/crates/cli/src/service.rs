//! HTTP session API. All session state lives in the store on disk; the
//! process only remembers which sessions have a loop task in flight.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use axum::body::{Body, Bytes};
use axum::extract::{FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use forge_core::pipeline::{
    new_session_id, Decision, Deps, Phase, Session, SessionDir, SessionInput, SessionState, SessionStatus,
    SessionStore, VerificationConfig,
};
use forge_core::render::View;
use forge_core::schema::InputKind;
use forge_core::similarity::ScoreMode;

use crate::config::Config;

pub struct AppState {
    store: SessionStore,
    deps: Option<Deps>,
    defaults: VerificationConfig,
    active: Mutex<HashSet<String>>,
}

impl AppState {
    /// `deps: None` makes session-starting endpoints answer 503.
    pub fn new(store: SessionStore, deps: Option<Deps>, defaults: VerificationConfig) -> Arc<Self> {
        Arc::new(Self {
            store,
            deps,
            defaults,
            active: Mutex::new(HashSet::new()),
        })
    }

    fn is_active(&self, id: &str) -> bool {
        self.active.lock().unwrap_or_else(|e| e.into_inner()).contains(id)
    }

    /// Claims the session's loop slot; `None` if a task already holds it.
    fn claim(self: &Arc<Self>, id: &str) -> Option<ActiveGuard> {
        let fresh = self.active.lock().unwrap_or_else(|e| e.into_inner()).insert(id.to_string());
        fresh.then(|| ActiveGuard {
            app: self.clone(),
            id: id.to_string(),
        })
    }
}

struct ActiveGuard {
    app: Arc<AppState>,
    id: String,
}

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        self.app.active.lock().unwrap_or_else(|e| e.into_inner()).remove(&self.id);
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/log", get(get_log))
        .route("/sessions/{id}/edits", post(post_edit))
        .route("/sessions/{id}/iterations/{n}/render/{view}", get(get_render))
        .route("/sessions/{id}/iterations/{n}/snippet", get(get_snippet))
        .with_state(state)
}

pub async fn serve(config: Config) -> Result<()> {
    let store = SessionStore::new(&config.data_dir)
        .with_context(|| format!("session store at {}", config.data_dir.display()))?;
    let deps = config.deps(config.load_schema()?, true)?;
    if deps.is_none() {
        tracing::warn!("no backend configured; session creation will answer 503");
    }
    let app = router(AppState::new(store, deps, config.defaults.clone()));
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .with_context(|| format!("binding {}", config.listen))?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_found(what: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("{what} not found"))
}

fn internal(e: impl std::fmt::Display) -> Response {
    tracing::error!(error = %e, "request failed");
    error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

// ------------------------------------------------------------ creation

/// Fields shared by the JSON and multipart forms of `POST /sessions`.
#[derive(Debug, Default, Deserialize)]
struct CreateForm {
    text: Option<String>,
    /// Base64 in JSON bodies, a file part in multipart bodies.
    image: Option<String>,
    kind: Option<InputKind>,
    #[serde(skip)]
    image_bytes: Option<Vec<u8>>,
    tau: Option<f64>,
    max_iterations: Option<u32>,
    repair_budget: Option<u32>,
    few_shot_k: Option<usize>,
    cot_enabled: Option<bool>,
    refine_enabled: Option<bool>,
    mode: Option<ScoreMode>,
}

impl CreateForm {
    fn config(&self, defaults: &VerificationConfig) -> VerificationConfig {
        let mut c = defaults.clone();
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = self.repair_budget {
            c.repair_budget = v;
        }
        if let Some(v) = self.few_shot_k {
            c.few_shot_k = v;
        }
        if let Some(v) = self.cot_enabled {
            c.cot_enabled = v;
        }
        if let Some(v) = self.refine_enabled {
            c.refine_enabled = v;
        }
        if let Some(v) = self.mode {
            c.mode = v;
        }
        c
    }

    fn input(&self) -> SessionInput {
        SessionInput {
            text: self.text.clone(),
            image: self.image_bytes.clone(),
            kind_override: self.kind,
        }
    }
}

fn is_multipart(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"))
}

fn parse_field<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, String> {
    value.trim().parse().map_err(|_| format!("bad value for {name}: {value:?}"))
}

fn parse_enum<T: serde::de::DeserializeOwned>(name: &str, value: &str) -> Result<T, String> {
    serde_json::from_value(json!(value.trim())).map_err(|_| format!("bad value for {name}: {value:?}"))
}

async fn read_multipart(mut mp: Multipart) -> Result<CreateForm, String> {
    let mut f = CreateForm::default();
    while let Some(field) = mp.next_field().await.map_err(|e| e.to_string())? {
        let name = field.name().unwrap_or_default().to_string();
        if name == "image" {
            let bytes = field.bytes().await.map_err(|e| e.to_string())?;
            f.image_bytes = (!bytes.is_empty()).then(|| bytes.to_vec());
            continue;
        }
        let value = field.text().await.map_err(|e| e.to_string())?;
        match name.as_str() {
            "text" => f.text = Some(value),
            "kind" => f.kind = Some(parse_enum("kind", &value)?),
            "tau" => f.tau = Some(parse_field("tau", &value)?),
            "max_iterations" => f.max_iterations = Some(parse_field("max_iterations", &value)?),
            "repair_budget" => f.repair_budget = Some(parse_field("repair_budget", &value)?),
            "few_shot_k" => f.few_shot_k = Some(parse_field("few_shot_k", &value)?),
            "cot_enabled" => f.cot_enabled = Some(parse_field("cot_enabled", &value)?),
            "refine_enabled" => f.refine_enabled = Some(parse_field("refine_enabled", &value)?),
            "mode" => f.mode = Some(parse_enum("mode", &value)?),
            other => return Err(format!("unknown field {other:?}")),
        }
    }
    Ok(f)
}

async fn read_create_form(req: Request) -> Result<CreateForm, String> {
    if is_multipart(req.headers()) {
        let mp = Multipart::from_request(req, &()).await.map_err(|e| e.body_text())?;
        return read_multipart(mp).await;
    }
    let body = Bytes::from_request(req, &()).await.map_err(|e| e.body_text())?;
    let mut f: CreateForm = if body.is_empty() {
        CreateForm::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| format!("invalid JSON body: {e}"))?
    };
    if let Some(b64) = f.image.take().filter(|s| !s.is_empty()) {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64.trim())
            .map_err(|e| format!("image is not base64: {e}"))?;
        f.image_bytes = Some(bytes);
    }
    Ok(f)
}

async fn create_session(State(app): State<Arc<AppState>>, req: Request) -> Response {
    let form = match read_create_form(req).await {
        Ok(f) => f,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    let input = form.input();
    if input.is_empty() {
        return error(StatusCode::BAD_REQUEST, "give text, an image or both");
    }
    let config = form.config(&app.defaults);
    if let Err(e) = config.validate() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string());
    }
    let Some(deps) = app.deps.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no backend configured");
    };

    let id = new_session_id();
    let Some(guard) = app.claim(&id) else {
        return internal("session id collision");
    };
    let created = {
        let (app, id) = (app.clone(), id.clone());
        tokio::task::spawn_blocking(move || -> Result<Session> {
            let dir = app.store.create(&id)?;
            Ok(Session::create(id, input, config, Some(dir))?)
        })
        .await
    };
    let mut session = match created {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => return internal(format!("{e:#}")),
        Err(e) => return internal(e),
    };
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        if let Err(e) = session.run(&deps) {
            tracing::error!(session = %session.state().id, error = %e, "session loop stopped");
        }
    });
    let location = format!("/sessions/{id}");
    (StatusCode::CREATED, [(header::LOCATION, location)], Json(json!({ "id": id }))).into_response()
}

// ------------------------------------------------------------ reads

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub i: u32,
    pub s: Option<f64>,
    pub decision: Option<Decision>,
    pub renders: BTreeMap<View, String>,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub instruction: String,
    pub base_iteration: u32,
    pub status: Option<String>,
}

/// Read-only view of a session for clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResource {
    pub id: String,
    pub status: SessionStatus,
    pub phase: Phase,
    pub iteration: u32,
    pub best_iteration: Option<u32>,
    pub final_iteration: Option<u32>,
    pub iterations: Vec<IterationSummary>,
    pub edits: Vec<EditSummary>,
    pub pending_edit: bool,
    pub failure: Option<String>,
    pub links: BTreeMap<String, String>,
}

impl SessionResource {
    /// `active` marks a loop task that has been started but may not have
    /// written its first record yet.
    pub fn from_state(state: &SessionState, active: bool) -> Self {
        let base = format!("/sessions/{}", state.id);
        let iterations = state
            .records
            .iter()
            .map(|r| IterationSummary {
                i: r.iteration,
                s: r.score().map(|s| s.get()),
                decision: r.decision,
                renders: r
                    .views
                    .iter()
                    .map(|v| (*v, format!("{base}/iterations/{}/render/{}", r.iteration, v.as_str())))
                    .collect(),
                snippet: format!("{base}/iterations/{}/snippet", r.iteration),
            })
            .collect();
        let edits: Vec<EditSummary> = state
            .edits
            .iter()
            .map(|e| EditSummary {
                instruction: e.instruction.clone(),
                base_iteration: e.base_iteration,
                status: e.status.map(|s| s.to_string()),
            })
            .collect();
        let edit_open = state.edits.last().is_some_and(|e| e.status.is_none());
        let mut status = state.status();
        if active && state.phase.is_terminal() {
            status = SessionStatus::Running;
        }
        let links = BTreeMap::from([("self".to_string(), base.clone()), ("log".to_string(), format!("{base}/log"))]);
        Self {
            id: state.id.clone(),
            status,
            phase: state.phase,
            iteration: state.iteration,
            best_iteration: state.best_iteration,
            final_iteration: state.final_iteration,
            iterations,
            edits,
            pending_edit: edit_open || (active && state.phase.is_editable()),
            failure: state.failure.clone(),
            links,
        }
    }
}

#[allow(clippy::result_large_err)]
fn open_dir(app: &AppState, id: &str) -> Result<SessionDir, Response> {
    match app.store.open(id) {
        Ok(Some(d)) => Ok(d),
        Ok(None) => Err(not_found("session")),
        Err(e) => Err(internal(e)),
    }
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let dir = match open_dir(&app, &id) {
        Ok(d) => d,
        Err(r) => return r,
    };
    match dir.read_state() {
        Ok(state) => Json(SessionResource::from_state(&state, app.is_active(&id))).into_response(),
        Err(e) => internal(e),
    }
}

async fn get_render(State(app): State<Arc<AppState>>, Path((id, n, view)): Path<(String, u32, String)>) -> Response {
    let dir = match open_dir(&app, &id) {
        Ok(d) => d,
        Err(r) => return r,
    };
    let Some(view) = View::parse(view.trim_end_matches(".png")) else {
        return not_found("view");
    };
    let state = match dir.read_state() {
        Ok(s) => s,
        Err(e) => return internal(e),
    };
    if !state.record(n).is_some_and(|r| r.views.contains(&view)) {
        return not_found("render");
    }
    match dir.read_render(n, view) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(_) => not_found("render"),
    }
}

async fn get_snippet(State(app): State<Arc<AppState>>, Path((id, n)): Path<(String, u32)>) -> Response {
    let dir = match open_dir(&app, &id) {
        Ok(d) => d,
        Err(r) => return r,
    };
    match dir.read_state() {
        Ok(s) if s.record(n).is_some() => {}
        Ok(_) => return not_found("iteration"),
        Err(e) => return internal(e),
    }
    match dir.read_snippet(n) {
        Ok(body) => ([(header::CONTENT_TYPE, "text/x-python; charset=utf-8")], body).into_response(),
        Err(_) => not_found("snippet"),
    }
}

async fn get_log(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let dir = match open_dir(&app, &id) {
        Ok(d) => d,
        Err(r) => return r,
    };
    match tokio::fs::read(dir.journal_path()).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from(bytes)).into_response(),
        Err(e) => internal(e),
    }
}

// ------------------------------------------------------------ edits

#[derive(Debug, Deserialize)]
struct EditBody {
    #[serde(default)]
    instruction: String,
}

async fn post_edit(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    let dir = match open_dir(&app, &id) {
        Ok(d) => d,
        Err(r) => return r,
    };
    let edit: EditBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid JSON body: {e}")),
    };
    if edit.instruction.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "instruction is empty");
    }
    let Some(deps) = app.deps.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no backend configured");
    };
    let Some(guard) = app.claim(&id) else {
        return error(StatusCode::CONFLICT, "session is running");
    };
    let state = match dir.read_state() {
        Ok(s) => s,
        Err(e) => return internal(e),
    };
    if !state.phase.is_editable() {
        return error(
            StatusCode::CONFLICT,
            format!("session is {}; only accepted or exhausted sessions take edits", state.phase),
        );
    }
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        let result = Session::open(dir).and_then(|mut s| s.apply_edit(&edit.instruction, &deps));
        if let Err(e) = result {
            tracing::error!(session = %id, error = %e, "edit stopped");
        }
    });
    (StatusCode::ACCEPTED, Json(json!({ "status": "running" }))).into_response()
}
