//! Session server: one dialog controller per session, reachable over HTTP
//! and a WebSocket.
//!
//! Every socket message is a JSON object
//! `{"type": "user_msg" | "agent_msg" | "event" | "error", "session": ..., "text"?: ..., "event"?: ...}`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;

use dualtrack::controller::{Controller, ControllerConfig, ControllerError, DialogEvent};
use dualtrack::experiments::events_jsonl;
use dualtrack::kb::{builtin_profile, KnowledgeBase, BUILTIN_PROFILES};
use dualtrack::parser::StopWords;
use dualtrack::solver::PolicyCache;

pub const DEFAULT_PROFILE: &str = "default";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown KB profile `{0}`")]
    UnknownProfile(String),
    #[error("profile `{name}` is invalid: {message}")]
    BadProfile { name: String, message: String },
    #[error("no session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` has terminated")]
    Terminated(String),
    #[error("message text is empty")]
    EmptyMessage,
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("worker failed: {0}")]
    Worker(String),
}

impl ServiceError {
    fn status(&self) -> StatusCode {
        match self {
            ServiceError::UnknownProfile(_) | ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ServiceError::Terminated(_) => StatusCode::CONFLICT,
            ServiceError::EmptyMessage | ServiceError::BadProfile { .. } => StatusCode::BAD_REQUEST,
            ServiceError::Controller(_) | ServiceError::Worker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownProfile(_) => "unknown_profile",
            ServiceError::BadProfile { .. } => "bad_profile",
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::Terminated(_) => "terminated",
            ServiceError::EmptyMessage => "empty_message",
            ServiceError::Controller(_) => "controller",
            ServiceError::Worker(_) => "worker",
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code().into(), message: self.to_string() };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    UserMsg,
    AgentMsg,
    Event,
    Error,
}

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    #[serde(rename = "type")]
    pub kind: MessageType,
    #[serde(default)]
    pub session: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<DialogEvent>,
}

impl WireMessage {
    fn agent(session: &str, event: &DialogEvent) -> [WireMessage; 2] {
        [
            WireMessage {
                kind: MessageType::AgentMsg,
                session: session.into(),
                text: Some(event.action.text.clone()),
                event: None,
            },
            WireMessage { kind: MessageType::Event, session: session.into(), text: None, event: Some(event.clone()) },
        ]
    }

    fn error(session: &str, err: &ServiceError) -> WireMessage {
        WireMessage { kind: MessageType::Error, session: session.into(), text: Some(err.to_string()), event: None }
    }
}

/// Server settings.
#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Directory of extra `<name>.kb` profiles.
    pub profile_dir: Option<PathBuf>,
    /// Directory for per-session JSON-lines event logs.
    pub log_dir: Option<PathBuf>,
    /// Corrupt parsed observations with the model's noise, for demos.
    pub simulate_noise: bool,
    pub policy_cache: Option<PathBuf>,
}

struct Session {
    id: String,
    profile: String,
    controller: Controller,
}

pub struct AppState {
    config: ServiceConfig,
    cache: Arc<PolicyCache>,
    stop_words: Arc<StopWords>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let cache = match &config.policy_cache {
            Some(dir) => PolicyCache::with_dir(dir.clone()),
            None => PolicyCache::in_memory(),
        };
        Arc::new(AppState {
            config,
            cache: Arc::new(cache),
            stop_words: Arc::new(StopWords::default()),
            sessions: RwLock::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    /// Profile names: bundled ones plus `*.kb` files in the profile directory.
    pub fn profiles(&self) -> Vec<String> {
        let mut names: Vec<String> = std::iter::once(DEFAULT_PROFILE.to_string())
            .chain(BUILTIN_PROFILES.iter().map(|(name, _)| name.to_string()))
            .collect();
        if let Some(dir) = &self.config.profile_dir {
            if let Ok(entries) = std::fs::read_dir(dir) {
                for entry in entries.flatten() {
                    let path = entry.path();
                    if path.extension().is_some_and(|e| e == "kb") {
                        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                            names.push(stem.to_string());
                        }
                    }
                }
            }
        }
        names.sort();
        names.dedup();
        names
    }

    fn load_profile(&self, name: &str) -> Result<KnowledgeBase, ServiceError> {
        let valid = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !valid {
            return Err(ServiceError::UnknownProfile(name.into()));
        }
        if let Some(dir) = &self.config.profile_dir {
            let path = dir.join(format!("{name}.kb"));
            if path.is_file() {
                let bad = |message: String| ServiceError::BadProfile { name: name.into(), message };
                let text = std::fs::read_to_string(&path).map_err(|e| bad(e.to_string()))?;
                return KnowledgeBase::deserialize(&text).map_err(|e| bad(e.to_string()));
            }
        }
        let builtin = if name == DEFAULT_PROFILE { "kb17" } else { name };
        builtin_profile(builtin).ok_or_else(|| ServiceError::UnknownProfile(name.into()))
    }

    fn controller_config(&self) -> ControllerConfig {
        let mut config = ControllerConfig::default();
        config.channel_noise = self.config.simulate_noise.then_some(config.params.noise);
        config
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.into()))
    }

    /// Creates a session and returns it with the opening agent event.
    pub async fn create_session(self: &Arc<Self>, profile: &str) -> Result<(String, DialogEvent), ServiceError> {
        let kb = self.load_profile(profile)?;
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let id = format!("s{n:06}");
        let state = self.clone();
        let (controller, opening) = tokio::task::spawn_blocking(move || {
            let mut controller =
                Controller::new(kb, state.controller_config(), state.cache.clone(), state.stop_words.clone(), n)?;
            let opening = controller.start()?.clone();
            Ok::<_, ServiceError>((controller, opening))
        })
        .await
        .map_err(|e| ServiceError::Worker(e.to_string()))??;
        let session = Session { id: id.clone(), profile: profile.into(), controller };
        self.persist(&session);
        self.sessions.write().expect("session table lock").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok((id, opening))
    }

    /// Feeds one user utterance to a session. Steps on one session never
    /// interleave.
    pub async fn user_message(&self, id: &str, text: &str) -> Result<DialogEvent, ServiceError> {
        if text.trim().is_empty() {
            return Err(ServiceError::EmptyMessage);
        }
        let session = self.session(id)?;
        let mut guard = session.lock_owned().await;
        if guard.controller.is_terminated() {
            return Err(ServiceError::Terminated(id.into()));
        }
        let text = text.to_string();
        let (guard, event) = tokio::task::spawn_blocking(move || {
            let event = guard.controller.step(&text).cloned();
            (guard, event)
        })
        .await
        .map_err(|e| ServiceError::Worker(e.to_string()))?;
        let event = event?;
        self.persist(&guard);
        Ok(event)
    }

    pub async fn log(&self, id: &str) -> Result<String, ServiceError> {
        let session = self.session(id)?;
        let guard = session.lock().await;
        Ok(events_jsonl(guard.controller.events()))
    }

    pub async fn summaries(&self) -> Vec<SessionSummary> {
        let sessions: Vec<_> = self.sessions.read().expect("session table lock").values().cloned().collect();
        let mut out = Vec::with_capacity(sessions.len());
        for s in sessions {
            let g = s.lock().await;
            out.push(SessionSummary {
                session: g.id.clone(),
                profile: g.profile.clone(),
                turns: g.controller.events().len(),
                kb_size: g.controller.kb().size(),
                terminated: g.controller.is_terminated(),
            });
        }
        out.sort_by(|a, b| a.session.cmp(&b.session));
        out
    }

    async fn history(&self, id: &str) -> Result<Vec<DialogEvent>, ServiceError> {
        let session = self.session(id)?;
        let guard = session.lock().await;
        Ok(guard.controller.events().to_vec())
    }

    fn persist(&self, session: &Session) {
        if let Some(dir) = &self.config.log_dir {
            let path: PathBuf = dir.join(format!("{}.jsonl", session.id));
            if let Err(e) = write_log(&path, session.controller.events()) {
                eprintln!("cannot write {}: {e}", path.display());
            }
        }
    }
}

fn write_log(path: &Path, events: &[DialogEvent]) -> std::io::Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    std::fs::write(path, events_jsonl(events))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: String,
    pub profile: String,
    pub turns: usize,
    pub kb_size: usize,
    pub terminated: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub profile: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct UserText {
    pub text: String,
}

/// Response to session creation and to each user message.
#[derive(Debug, Serialize, Deserialize)]
pub struct Exchange {
    pub session: String,
    pub messages: Vec<WireMessage>,
    pub terminated: bool,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/profiles", get(list_profiles))
        .route("/sessions", post(create).get(list_sessions))
        .route("/sessions/{id}/messages", post(message))
        .route("/sessions/{id}/log", get(log))
        .route("/sessions/{id}/ws", get(socket))
        .with_state(state)
}

async fn list_profiles(State(state): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(state.profiles())
}

async fn create(
    State(state): State<Arc<AppState>>,
    body: Option<Json<CreateSession>>,
) -> Result<(StatusCode, Json<Exchange>), ServiceError> {
    let profile = body.and_then(|Json(b)| b.profile).unwrap_or_else(|| DEFAULT_PROFILE.into());
    let (id, opening) = state.create_session(&profile).await?;
    let messages = WireMessage::agent(&id, &opening).to_vec();
    Ok((StatusCode::CREATED, Json(Exchange { session: id, messages, terminated: false })))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    Json(state.summaries().await)
}

async fn message(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<UserText>,
) -> Result<Json<Exchange>, ServiceError> {
    let event = state.user_message(&id, &body.text).await?;
    let terminated = event.report.is_some();
    Ok(Json(Exchange { messages: WireMessage::agent(&id, &event).to_vec(), session: id, terminated }))
}

async fn log(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ServiceError> {
    let body = state.log(&id).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn socket(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ServiceError> {
    state.session(&id)?;
    Ok(ws.on_upgrade(move |socket| serve_socket(state, id, socket)))
}

async fn send(socket: &mut WebSocket, message: &WireMessage) -> bool {
    let text = serde_json::to_string(message).expect("wire messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn serve_socket(state: Arc<AppState>, id: String, mut socket: WebSocket) {
    // Replay the transcript so a reconnecting client can rebuild its view.
    if let Ok(history) = state.history(&id).await {
        for event in &history {
            if let Some(text) = &event.user_utterance {
                let user =
                    WireMessage { kind: MessageType::UserMsg, session: id.clone(), text: Some(text.clone()), event: None };
                if !send(&mut socket, &user).await {
                    return;
                }
            }
            for m in WireMessage::agent(&id, event) {
                if !send(&mut socket, &m).await {
                    return;
                }
            }
        }
    }
    while let Some(Ok(msg)) = socket.recv().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<WireMessage>(&text) {
            Ok(WireMessage { kind: MessageType::UserMsg, text: Some(utterance), .. }) => {
                match state.user_message(&id, &utterance).await {
                    Ok(event) => WireMessage::agent(&id, &event).to_vec(),
                    Err(e) => vec![WireMessage::error(&id, &e)],
                }
            }
            _ => vec![WireMessage {
                kind: MessageType::Error,
                session: id.clone(),
                text: Some("expected {\"type\": \"user_msg\", \"text\": ...}".into()),
                event: None,
            }],
        };
        for m in &reply {
            if !send(&mut socket, m).await {
                return;
            }
        }
    }
}
