//! HTTP control plane over agentos sessions.
//!
//! Every session owns a simulated desktop built from the configured catalog.
//! Rounds run on the blocking pool; clients follow them through the
//! long-poll event stream and answer confirmations and clarifications while
//! the round waits.

mod error;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use agentos_core::runtime::{CatalogBundle, RuntimeConfig, Services};
use agentos_core::session::evaluate::{RuleEvaluator, SuccessPredicate};
use agentos_core::session::interaction::{channel, Decision, InteractionHandle, Waiting};
use agentos_core::session::markdown::export_markdown;
use agentos_core::session::trace::{EventLog, TraceEvent};
use agentos_core::session::{Round, Session, SessionStatus};

pub use error::ApiError;

/// Longest a single events request may block.
pub const MAX_WAIT_MS: u64 = 30_000;

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: SessionStatus,
    pub round_in_progress: bool,
    pub waiting: Waiting,
    pub rounds: Vec<Round>,
    pub events: usize,
}

struct Slot {
    id: String,
    session: Mutex<Session>,
    log: Arc<EventLog>,
    running: AtomicBool,
    handle: Mutex<Option<InteractionHandle>>,
    /// Copy of the session's rounds and status, refreshed when a round
    /// starts or ends, so readers never wait on a running round.
    cached: RwLock<(SessionStatus, Vec<Round>)>,
}

impl Slot {
    fn summary(&self) -> SessionSummary {
        let (status, rounds) = self.cached.read().clone();
        SessionSummary {
            session_id: self.id.clone(),
            status,
            round_in_progress: self.running.load(Ordering::SeqCst),
            waiting: self.handle.lock().as_ref().map_or(Waiting::Nothing, InteractionHandle::waiting),
            rounds,
            events: self.log.len(),
        }
    }

    fn refresh(&self, session: &Session) {
        *self.cached.write() = (session.status(), session.rounds().to_vec());
    }

    fn handle(&self) -> Option<InteractionHandle> {
        self.handle.lock().clone()
    }
}

pub struct AppState {
    bundle: CatalogBundle,
    services: Arc<Services>,
    config: RuntimeConfig,
    sessions: RwLock<BTreeMap<String, Arc<Slot>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(bundle: CatalogBundle, services: Arc<Services>, config: RuntimeConfig) -> Arc<Self> {
        Arc::new(Self {
            bundle,
            services,
            config,
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions.read().get(id).cloned().ok_or_else(|| ApiError::UnknownSession(id.into()))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/rounds", post(start_round))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/confirm", post(confirm))
        .route("/sessions/{id}/reply", post(reply))
        .route("/sessions/{id}/cancel", post(cancel))
        .route("/sessions/{id}/log", get(log))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr().ok(), "agentos service listening");
    axum::serve(listener, router(state)).await
}

fn parse<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(e.to_string()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    /// Apps to open before the first round.
    #[serde(default)]
    apps: Vec<String>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: CreateSession = parse(&body)?;
    let id = format!("session-{}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let log = EventLog::new();
    let mut session = Session::with_log(&id, state.bundle.catalog.clone(), state.services.clone(), state.config.clone(), log.clone());
    session.open_apps(&req.apps).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let slot = Arc::new(Slot {
        id: id.clone(),
        cached: RwLock::new((session.status(), Vec::new())),
        session: Mutex::new(session),
        log,
        running: AtomicBool::new(false),
        handle: Mutex::new(None),
    });
    state.sessions.write().insert(id.clone(), slot);
    tracing::info!(session = %id, "session created");
    Ok((StatusCode::CREATED, Json(json!({"session_id": id}))))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    Json(state.sessions.read().values().map(|s| s.summary()).collect())
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionSummary>, ApiError> {
    Ok(Json(state.slot(&id)?.summary()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartRound {
    request: String,
    /// When given, the round is evaluated against these once it ends.
    #[serde(default)]
    success_predicates: Vec<SuccessPredicate>,
}

async fn start_round(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let slot = state.slot(&id)?;
    let req: StartRound = parse(&body)?;
    if req.request.trim().is_empty() {
        return Err(ApiError::BadRequest("request must not be empty".into()));
    }
    if slot.running.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
        return Err(ApiError::Conflict("a round is already in progress".into()));
    }
    let index = {
        let mut session = slot.session.lock();
        match session.start_round(req.request.clone()) {
            Ok(index) => {
                slot.refresh(&session);
                index
            }
            Err(e) => {
                slot.running.store(false, Ordering::SeqCst);
                return Err(ApiError::Conflict(e.to_string()));
            }
        }
    };
    let (mut interaction, handle) = channel();
    *slot.handle.lock() = Some(handle);
    let worker = slot.clone();
    tokio::task::spawn_blocking(move || {
        let mut session = worker.session.lock();
        match session.run_active_round(&mut interaction) {
            Ok(outcome) => {
                tracing::info!(session = %worker.id, round = index, status = %outcome.status, "round finished");
                if !req.success_predicates.is_empty() {
                    let evaluator = RuleEvaluator {
                        predicates: req.success_predicates,
                    };
                    if let Err(e) = session.evaluate_round(index, &evaluator) {
                        tracing::warn!(session = %worker.id, round = index, error = %e, "evaluation failed");
                    }
                }
            }
            Err(e) => tracing::error!(session = %worker.id, round = index, error = %e, "round could not run"),
        }
        worker.refresh(&session);
        drop(session);
        *worker.handle.lock() = None;
        worker.running.store(false, Ordering::SeqCst);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"round_index": index}))))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    #[serde(default)]
    since: u64,
    #[serde(default)]
    wait_ms: u64,
}

async fn events(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> Result<Json<Vec<TraceEvent>>, ApiError> {
    let slot = state.slot(&id)?;
    if q.wait_ms == 0 {
        return Ok(Json(slot.log.since(q.since)));
    }
    let wait = Duration::from_millis(q.wait_ms.min(MAX_WAIT_MS));
    let log = slot.log.clone();
    let events = tokio::task::spawn_blocking(move || log.wait_since(q.since, wait))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(events))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Confirm {
    decision: Option<Decision>,
}

async fn confirm(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let slot = state.slot(&id)?;
    let req: Confirm = parse(&body)?;
    let decision = req.decision.ok_or_else(|| ApiError::BadRequest("missing `decision` (approve or deny)".into()))?;
    let handle = slot.handle().ok_or_else(|| ApiError::Conflict("nothing is pending".into()))?;
    handle.decide(decision).map_err(|_| ApiError::Conflict("nothing is pending".into()))?;
    Ok(Json(json!({"decision": decision})))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Reply {
    text: String,
}

async fn reply(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let slot = state.slot(&id)?;
    let req: Reply = parse(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::BadRequest("reply text must not be empty".into()));
    }
    let handle = slot.handle().ok_or_else(|| ApiError::Conflict("no question is waiting for an answer".into()))?;
    handle.reply(req.text).map_err(|_| ApiError::Conflict("no question is waiting for an answer".into()))?;
    Ok(Json(json!({"accepted": true})))
}

async fn cancel(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let slot = state.slot(&id)?;
    let handle = slot.handle().ok_or_else(|| ApiError::Conflict("no round is running".into()))?;
    handle.cancel();
    Ok(Json(json!({"cancelled": true})))
}

async fn log(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let slot = state.slot(&id)?;
    let markdown = export_markdown(&slot.id, &slot.log.snapshot());
    Ok(([(header::CONTENT_TYPE, "text/markdown; charset=utf-8")], markdown))
}
