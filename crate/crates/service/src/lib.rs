//! HTTP chat service: sessions over a shared, read-only engine snapshot.
//!
//! Endpoints (JSON bodies):
//!
//! - `POST /api/chat` `{session_id?, text, mode, skill_id?, style_id?}`
//! - `GET /api/skills`
//! - `GET /api/session/{id}`, `DELETE /api/session/{id}`
//! - `GET /api/health`

mod config;
mod filter;
mod session;

pub use config::ServiceConfig;
pub use filter::{BlockList, ResponseFilter};
pub use session::{Mode, Session, Turn};

use std::collections::HashMap;
use std::sync::Arc;

use adapterbot::backbone::{DecodeMode, DecodeParams, RerankParams};
use adapterbot::corpus::Resources;
use adapterbot::dialogue::{MetaKnowledge, SkillId, Speaker, Utterance};
use adapterbot::engine::{Engine, SkillInfo};
use adapterbot::manager::HistoryMode;
use adapterbot::pipeline::ArtifactDir;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown session {0}")]
    NoSession(String),
    #[error("engine is loading")]
    Loading,
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] adapterbot::Error),
    #[error("{0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::NoSession(_) => StatusCode::NOT_FOUND,
            Self::Loading => StatusCode::SERVICE_UNAVAILABLE,
            Self::Engine(adapterbot::Error::Routing(_) | adapterbot::Error::Length { .. }) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    pub text: String,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub skill_id: Option<u32>,
    #[serde(default)]
    pub style_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: f64,
    pub chosen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub session_id: String,
    pub text: String,
    pub skill_id: u32,
    /// Manager probability of the routed skill (auto mode only).
    pub confidence: Option<f64>,
    pub knowledge: MetaKnowledge,
    pub candidates: Vec<Candidate>,
    pub filtered: bool,
}

/// Shared server state. The engine slot is empty while loading; replacing
/// it swaps the snapshot atomically for subsequent requests.
pub struct AppState {
    engine: RwLock<Option<Arc<Engine>>>,
    resources: Arc<Resources>,
    filter: Arc<dyn ResponseFilter>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(config: ServiceConfig, resources: Resources, filter: Arc<dyn ResponseFilter>) -> Arc<Self> {
        Arc::new(Self {
            engine: RwLock::new(None),
            resources: Arc::new(resources),
            filter,
            sessions: RwLock::new(HashMap::new()),
            config,
        })
    }

    pub fn with_engine(
        config: ServiceConfig,
        resources: Resources,
        filter: Arc<dyn ResponseFilter>,
        engine: Engine,
    ) -> Arc<Self> {
        let s = Self::new(config, resources, filter);
        s.install(engine);
        s
    }

    pub fn install(&self, engine: Engine) {
        *self.engine.write() = Some(Arc::new(engine));
    }

    pub fn engine(&self) -> Result<Arc<Engine>, ServiceError> {
        self.engine.read().clone().ok_or(ServiceError::Loading)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NoSession(id.to_string()))
    }

    fn create_session(&self) -> (String, Arc<Mutex<Session>>) {
        let s = Session::new();
        let id = s.session_id.clone();
        let slot = Arc::new(Mutex::new(s));
        self.sessions.write().insert(id.clone(), slot.clone());
        (id, slot)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/chat", post(chat))
        .route("/api/skills", get(skills))
        .route("/api/session/{id}", get(get_session).delete(delete_session))
        .route("/api/health", get(health))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let status = if state.engine.read().is_some() { "ready" } else { "loading" };
    Json(json!({ "status": status }))
}

async fn skills(State(state): State<Arc<AppState>>) -> Result<Json<Vec<SkillInfo>>, ServiceError> {
    Ok(Json(state.engine()?.skills()))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Session>, ServiceError> {
    let slot = state.session(&id)?;
    let s = slot.lock().await.clone();
    Ok(Json(s))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ServiceError> {
    state
        .sessions
        .write()
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or(ServiceError::NoSession(id))
}

/// Rejects a request before any session state is touched.
pub fn check_request(engine: &Engine, config: &ServiceConfig, req: &ChatRequest) -> Result<(), ServiceError> {
    if req.text.trim().is_empty() {
        return Err(ServiceError::BadRequest("text must not be empty".into()));
    }
    let n_chars = req.text.chars().count();
    if n_chars > config.max_text_chars {
        return Err(ServiceError::BadRequest(format!(
            "text has {n_chars} characters, limit {}",
            config.max_text_chars
        )));
    }
    if let Some(t) = req.skill_id {
        engine
            .adapters()
            .get(SkillId(t))
            .map_err(|_| ServiceError::BadRequest(format!("unknown skill_id {t}")))?;
    }
    if req.mode == Mode::Manual && req.skill_id.is_none() {
        return Err(ServiceError::BadRequest("manual mode requires skill_id".into()));
    }
    if req.mode == Mode::Auto && engine.manager().is_none() {
        return Err(ServiceError::BadRequest("auto mode needs a trained dialogue manager".into()));
    }
    if let Some(s) = req.style_id {
        if engine.style(s).is_none() {
            return Err(ServiceError::BadRequest(format!("unknown style_id {s}")));
        }
    }
    Ok(())
}

/// One exchange: route (auto mode), retrieve, generate, filter once, and
/// append both turns to `session`. Shared by the HTTP handler and the
/// terminal chat.
pub fn take_turn(
    engine: &Engine,
    resources: &Resources,
    config: &ServiceConfig,
    filter: &dyn ResponseFilter,
    session: &mut Session,
    req: &ChatRequest,
) -> Result<ChatResponse, ServiceError> {
    check_request(engine, config, req)?;
    let mut history = session.history();
    history.push(Utterance::user(req.text.clone()));
    let (skill, confidence) = match (req.mode, req.skill_id) {
        (Mode::Manual, Some(t)) => (SkillId(t), None),
        _ => {
            let (t, p) = engine.predict_skill(&history, HistoryMode::MultiTurn)?;
            (t, Some(p))
        }
    };
    let knowledge = engine.knowledge_for(skill, &history, resources, config.persona.as_deref())?;
    let decode = turn_decode(config, req.style_id, session.exchanges);
    let reply = engine.respond(&history, &knowledge, skill, &decode)?;

    let filtered = filter.blocked(&reply.utterance.text);
    // An empty generation would break the history contract on the next turn.
    let text = if filtered || reply.utterance.text.trim().is_empty() {
        config.fallback_text.clone()
    } else {
        reply.utterance.text.clone()
    };
    let candidates = match req.style_id {
        Some(style) => reply
            .candidates
            .iter()
            .map(|c| Candidate {
                text: c.text.clone(),
                score: c.scores.get(&style).copied().unwrap_or(0.0),
                chosen: c.chosen,
            })
            .collect(),
        None => Vec::new(),
    };
    session.mode = req.mode;
    session.skill_id = req.skill_id;
    session.style_id = req.style_id;
    session.push_exchange(
        Turn::user(req.text.clone()),
        Turn {
            speaker: Speaker::System,
            text: text.clone(),
            skill_id: Some(skill.0),
            confidence,
            knowledge: Some(knowledge.clone()),
            style_id: req.style_id,
            filtered,
        },
        config.max_turns,
    );
    Ok(ChatResponse {
        session_id: session.session_id.clone(),
        text,
        skill_id: skill.0,
        confidence,
        knowledge,
        candidates,
        filtered,
    })
}

async fn chat(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<ChatResponse>, ServiceError> {
    let req: ChatRequest =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(format!("invalid request body: {e}")))?;
    let engine = state.engine()?;
    check_request(&engine, &state.config, &req)?;
    let slot = match &req.session_id {
        Some(id) => state.session(id)?,
        None => state.create_session().1,
    };
    // Per-session serialization: the lock is held for the whole turn.
    let mut session = slot.lock_owned().await;
    let st = state.clone();
    let resp = tokio::task::spawn_blocking(move || {
        take_turn(&engine, &st.resources, &st.config, st.filter.as_ref(), &mut session, &req)
    })
    .await
    .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))??;
    Ok(Json(resp))
}

/// Greedy by default; with a style, top-k sampling plus re-ranking seeded
/// from the session's exchange count so replays reproduce.
pub fn turn_decode(config: &ServiceConfig, style: Option<u32>, exchanges: u64) -> DecodeParams {
    match style {
        None => config.decode.clone(),
        Some(style_id) => DecodeParams {
            mode: DecodeMode::TopK,
            seed: config.decode.seed.wrapping_add(exchanges.wrapping_mul(1000)),
            rerank: Some(RerankParams {
                style_id,
                n_candidates: config.rerank_candidates,
            }),
            ..config.decode.clone()
        },
    }
}

pub fn load_filter(config: &ServiceConfig) -> Result<Arc<dyn ResponseFilter>, ServiceError> {
    Ok(match &config.blocklist {
        Some(p) => Arc::new(BlockList::load(p).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?),
        None => Arc::new(BlockList::default()),
    })
}

/// Binds, reports the bound address through `on_bound`, loads the engine in
/// the background (requests get 503 meanwhile) and serves until ctrl-c.
pub async fn run(config: ServiceConfig, on_bound: impl FnOnce(std::net::SocketAddr)) -> Result<(), ServiceError> {
    config.validate()?;
    let resources = config.resources()?;
    let filter = load_filter(&config)?;
    let dir = ArtifactDir::new(&config.artifacts);
    if !dir.backbone().exists() {
        return Err(ServiceError::Config(format!("missing checkpoint {}", dir.backbone().display())));
    }
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    let addr = listener.local_addr()?;
    let state = AppState::new(config, resources, filter);
    on_bound(addr);
    let loader = state.clone();
    let load = tokio::task::spawn_blocking(move || dir.load_engine());
    tokio::spawn(async move {
        match load.await {
            Ok(Ok(engine)) => {
                tracing::info!(skills = engine.adapters().len(), "engine loaded");
                loader.install(engine);
            }
            Ok(Err(e)) => {
                tracing::error!("engine failed to load: {e}");
                std::process::exit(1);
            }
            Err(e) => {
                tracing::error!("engine loader panicked: {e}");
                std::process::exit(1);
            }
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// One replayed exchange: the recorded system reply and the regenerated one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayedTurn {
    pub user: String,
    pub recorded: String,
    pub replayed: String,
}

/// Re-runs a saved transcript against `engine` in a fresh session. Each
/// exchange reuses the recorded mode (a confidence means it was routed),
/// skill and style.
pub fn replay(
    engine: &Engine,
    resources: &Resources,
    config: &ServiceConfig,
    filter: &dyn ResponseFilter,
    transcript: &Session,
) -> Result<Vec<ReplayedTurn>, ServiceError> {
    if transcript.exchanges as usize * 2 != transcript.turns.len() {
        return Err(ServiceError::BadRequest(
            "transcript has evicted turns and cannot be replayed".into(),
        ));
    }
    let mut session = Session::new();
    let mut out = Vec::new();
    for pair in transcript.turns.chunks(2) {
        let [user, system] = pair else { unreachable!("even length") };
        if user.speaker != Speaker::User || system.speaker != Speaker::System {
            return Err(ServiceError::BadRequest("transcript turns must alternate user, system".into()));
        }
        let req = ChatRequest {
            session_id: None,
            text: user.text.clone(),
            mode: if system.confidence.is_some() { Mode::Auto } else { Mode::Manual },
            skill_id: system.skill_id.filter(|_| system.confidence.is_none()),
            style_id: system.style_id,
        };
        let r = take_turn(engine, resources, config, filter, &mut session, &req)?;
        out.push(ReplayedTurn {
            user: user.text.clone(),
            recorded: system.text.clone(),
            replayed: r.text,
        });
    }
    Ok(out)
}
