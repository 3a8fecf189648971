//! HTTP chat sessions over a frozen model, with per-turn diagnostics.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use empdial_core::corpus::Role;
use empdial_core::labels::{Emotion, Intent};
use empdial_core::model::Model;
use empdial_core::pipeline::ChatTurn;
use empdial_core::respg::SamplingOptions;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

/// Largest seed handed out by the server, so browser clients can echo it
/// back exactly.
pub const MAX_AUTO_SEED: u64 = (1 << 53) - 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ServiceOptions {
    pub sampling: SamplingOptions,
    pub session_ttl: Duration,
    /// Append one JSON line per answered message.
    pub transcript: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self {
            sampling: SamplingOptions {
                top_k: 5,
                temperature: 1.0,
                max_new: 32,
            },
            session_ttl: Duration::from_secs(3600),
            transcript: None,
            checkpoint: None,
        }
    }
}

/// Diagnostics for one listener turn, as returned by the message endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub response: String,
    pub speaker_emotion: IndexMap<String, f64>,
    pub listener_emotion: IndexMap<String, f64>,
    pub intent_probs: IndexMap<String, f64>,
    pub intents: Vec<String>,
    pub gate: f64,
    pub seed: u64,
}

fn named(names: &[&str], values: &[f64]) -> IndexMap<String, f64> {
    names.iter().map(|n| n.to_string()).zip(values.iter().copied()).collect()
}

impl From<&ChatTurn> for TurnResult {
    fn from(t: &ChatTurn) -> Self {
        Self {
            response: t.response.clone(),
            speaker_emotion: named(Emotion::NAMES, &t.state.p_speaker),
            listener_emotion: named(Emotion::NAMES, &t.state.p_listener),
            intent_probs: named(Intent::NAMES, &t.state.p_intent),
            intents: Intent::ALL
                .iter()
                .filter(|i| t.state.intents[i.id()])
                .map(|i| i.name().to_string())
                .collect(),
            gate: t.gate,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnText {
    pub role: Role,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub turns: Vec<TurnText>,
    pub trace: Vec<TurnResult>,
}

#[derive(Debug)]
struct Session {
    turns: Vec<TurnText>,
    trace: Vec<TurnResult>,
    last_active: Instant,
}

type SessionHandle = Arc<tokio::sync::Mutex<Session>>;

pub struct AppState {
    model: Option<Arc<Model<f32>>>,
    options: ServiceOptions,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    transcript: Option<Mutex<File>>,
}

impl AppState {
    pub fn new(model: Option<Model<f32>>, options: ServiceOptions) -> std::io::Result<Arc<Self>> {
        let transcript = match &options.transcript {
            Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        Ok(Arc::new(Self {
            model: model.map(Arc::new),
            options,
            sessions: Mutex::new(HashMap::new()),
            transcript,
        }))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub async fn evict_idle(&self) -> usize {
        let handles: Vec<(String, SessionHandle)> = {
            let map = self.sessions.lock().expect("session map");
            map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        let mut stale = Vec::new();
        for (id, h) in handles {
            // Sessions busy with a request are active by definition.
            if let Ok(s) = h.try_lock() {
                if s.last_active.elapsed() > self.options.session_ttl {
                    stale.push(id);
                }
            }
        }
        let mut map = self.sessions.lock().expect("session map");
        for id in &stale {
            map.remove(id);
        }
        stale.len()
    }

    fn session(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.lock().expect("session map").get(id).cloned()
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
}

async fn create_session(State(app): State<Arc<AppState>>) -> Result<impl IntoResponse, ApiError> {
    if app.model.is_none() {
        return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()));
    }
    let id = uuid::Uuid::new_v4().to_string();
    let session = Session {
        turns: Vec::new(),
        trace: Vec::new(),
        last_active: Instant::now(),
    };
    app.sessions
        .lock()
        .expect("session map")
        .insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "session_id": id }))))
}

#[derive(Debug, Deserialize)]
pub struct MessageRequest {
    pub text: String,
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    session_id: &'a str,
    text: &'a str,
    seed: u64,
    result: &'a TurnResult,
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<MessageRequest>,
) -> Result<Json<TurnResult>, ApiError> {
    let model = app
        .model
        .clone()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()))?;
    let handle = app.session(&id).ok_or_else(|| not_found(&id))?;
    let text = req.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "message text is empty".into()));
    }
    let seed = req.seed.unwrap_or_else(|| rand::random::<u64>() & MAX_AUTO_SEED);
    let mut session = handle.lock().await;
    let mut turns = session.turns.clone();
    turns.push(TurnText {
        role: Role::Speaker,
        text: text.clone(),
    });
    let sampling = app.options.sampling;
    let history = turns.clone();
    let turn = tokio::task::spawn_blocking(move || {
        let context = model.context_for(history.iter().map(|t| (t.role, t.text.as_str())))?;
        model.respond(&context, &sampling, seed)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let result = TurnResult::from(&turn);
    turns.push(TurnText {
        role: Role::Listener,
        text: result.response.clone(),
    });
    session.turns = turns;
    session.trace.push(result.clone());
    session.last_active = Instant::now();
    if let Some(file) = &app.transcript {
        let line = TranscriptLine {
            session_id: &id,
            text: &text,
            seed,
            result: &result,
        };
        let mut f = file.lock().expect("transcript");
        let json = serde_json::to_string(&line).expect("transcript line serializes");
        if let Err(e) = writeln!(f, "{json}") {
            log::warn!("transcript write failed: {e}");
        }
    }
    Ok(Json(result))
}

async fn get_session(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionView>, ApiError> {
    let handle = app.session(&id).ok_or_else(|| not_found(&id))?;
    let mut s = handle.lock().await;
    s.last_active = Instant::now();
    Ok(Json(SessionView {
        session_id: id,
        turns: s.turns.clone(),
        trace: s.trace.clone(),
    }))
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let sessions = app.session_count();
    let checkpoint = app.options.checkpoint.as_ref().map(|p| p.display().to_string());
    Json(match &app.model {
        None => serde_json::json!({ "status": "no-model", "sessions": sessions }),
        Some(m) => serde_json::json!({
            "status": "ok",
            "checkpoint": checkpoint,
            "vocab_size": m.vocab.len(),
            "d_model": m.config.d_model,
            "layers": m.config.layers,
            "heads": m.config.heads,
            "max_len": m.config.max_len,
            "emotions": Emotion::NAMES,
            "intents": Intent::NAMES,
            "top_k": app.options.sampling.top_k,
            "temperature": app.options.sampling.temperature,
            "sessions": sessions,
        }),
    })
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session))
        .route("/api/session/{id}/message", post(post_message))
        .route("/api/health", get(health))
        .with_state(app)
}

/// Serves until the listener fails, evicting idle sessions in the
/// background.
pub async fn serve(listener: TcpListener, app: Arc<AppState>) -> std::io::Result<()> {
    let sweeper = app.clone();
    let period = (app.options.session_ttl / 4).clamp(Duration::from_millis(10), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.evict_idle().await;
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(app)).await
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn(addr: &str, app: Arc<AppState>) -> std::io::Result<std::net::SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener, app).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok(local)
}

/// Convenience for reading a transcript file written with
/// [`ServiceOptions::transcript`].
pub fn read_transcript(path: &Path) -> std::io::Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
