//! HTTP chat endpoint over a loaded model with in-memory sessions.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::dataset::{tokenize, Speaker};
use crate::model::{Generation, KgirNet};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub beam_width: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_ttl: Duration::from_secs(3600),
            beam_width: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionTurn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug)]
struct Session {
    turns: Vec<SessionTurn>,
    history: Vec<Vec<String>>,
    last_used: Instant,
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

#[derive(Clone)]
pub struct AppState {
    model: Arc<KgirNet>,
    config: ServiceConfig,
    sessions: Arc<Mutex<HashMap<String, SessionHandle>>>,
}

impl AppState {
    pub fn new(model: KgirNet, config: ServiceConfig) -> Self {
        Self {
            model: Arc::new(model),
            config,
            sessions: Arc::default(),
        }
    }

    fn evict_expired(&self, sessions: &mut HashMap<String, SessionHandle>) {
        let ttl = self.config.session_ttl;
        sessions.retain(|_, s| match s.try_lock() {
            Ok(s) => s.last_used.elapsed() < ttl,
            // busy sessions are in use, so not expired
            Err(_) => true,
        });
    }

    fn session(&self, id: &str) -> Option<SessionHandle> {
        let mut sessions = self.sessions.lock().expect("session map poisoned");
        self.evict_expired(&mut sessions);
        sessions.get(id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map poisoned").len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

/// Reply payload: surface text plus the provenance the chat client displays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageReply {
    pub response: String,
    pub intermediate: String,
    pub entity: String,
    pub confidence: f64,
    pub low_confidence: bool,
    pub relations: Vec<String>,
    pub objects: Vec<String>,
    pub unresolved: Vec<String>,
    pub subgraph_relations: Vec<String>,
}

impl From<Generation> for MessageReply {
    fn from(g: Generation) -> Self {
        Self {
            response: g.response.join(" "),
            intermediate: g.intermediate.join(" "),
            entity: g.entity,
            confidence: g.confidence,
            low_confidence: g.low_confidence,
            relations: g.relations,
            objects: g.objects,
            unresolved: g.unresolved,
            subgraph_relations: g.subgraph_relations,
        }
    }
}

#[derive(Debug, Serialize)]
struct SessionView {
    session_id: String,
    turns: Vec<SessionTurn>,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(show_session))
        .route("/sessions/{id}/message", post(post_message))
        .with_state(state)
}

async fn create_session(State(state): State<AppState>) -> (StatusCode, Json<CreatedSession>) {
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session {
        turns: Vec::new(),
        history: Vec::new(),
        last_used: Instant::now(),
    };
    {
        let mut sessions = state.sessions.lock().expect("session map poisoned");
        state.evict_expired(&mut sessions);
        sessions.insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    }
    (StatusCode::CREATED, Json(CreatedSession { session_id: id }))
}

async fn show_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let handle = state.session(&id).ok_or_else(|| not_found(&id))?;
    let session = handle.lock().await;
    Ok(Json(SessionView {
        session_id: id,
        turns: session.turns.clone(),
    }))
}

async fn post_message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<MessageRequest>,
) -> Result<Json<MessageReply>, ApiError> {
    let handle = state.session(&id).ok_or_else(|| not_found(&id))?;
    let query = tokenize(&req.text);
    if query.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "message text is empty".into()));
    }
    // held across generation: one message in flight per session
    let mut session = handle.lock().await;
    let history = session.history.clone();
    let model = Arc::clone(&state.model);
    let width = state.config.beam_width;
    let q = query.clone();
    let generation = tokio::task::spawn_blocking(move || model.generate_with(&history, &q, width))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;

    session.turns.push(SessionTurn {
        speaker: Speaker::User,
        text: req.text.trim().to_string(),
    });
    session.turns.push(SessionTurn {
        speaker: Speaker::System,
        text: generation.text(),
    });
    session.history.push(query);
    session.history.push(generation.response.clone());
    session.last_used = Instant::now();
    Ok(Json(generation.into()))
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
