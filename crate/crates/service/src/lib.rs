//! HTTP+JSON facade over scoring and persona-steered generation.
//!
//! | Method | Path | Body |
//! |---|---|---|
//! | POST | `/v1/sessions` | `{model_id, speakers, turns?, references?}` |
//! | GET | `/v1/sessions/{id}` | |
//! | POST | `/v1/sessions/{id}/turns` | `{author, text}` |
//! | PUT | `/v1/sessions/{id}/references/{author}` | `{references: [{parent?, reply, reply_id?, score?}]}` |
//! | POST | `/v1/sessions/{id}/sample` | `{target, top_p?, temperature?, max_new_tokens?, seed?, greedy?}` |
//! | POST | `/v1/score` | `{model_id, conversation: {conversation_id?, turns}, references?}` |
//! | GET | `/v1/models` | |
//!
//! Errors are `{code, message, field?}`.

pub mod api;
pub mod error;
pub mod models;
pub mod sessions;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::routing::{get, post, put};
use axum::Router;

pub use error::{ApiError, ErrorBody};
pub use models::ModelRegistry;
pub use sessions::SessionStore;

/// Env var holding the bind address.
pub const BIND_ENV: &str = "CONVCTL_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const JOURNAL_FILE: &str = "sessions.journal";

#[derive(Debug)]
pub struct AppState {
    pub models: ModelRegistry,
    pub sessions: SessionStore,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("loading models: {0}")]
    Models(#[from] convctl_core::evalgen::EvalError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad bind address {0:?}")]
    Bind(String),
}

impl AppState {
    /// Loads every model under `model_dir` and replays the session journal
    /// (default `<model_dir>/sessions.journal`).
    pub fn open(model_dir: &Path, journal: Option<PathBuf>) -> Result<Self, ServiceError> {
        let models = ModelRegistry::load_dir(model_dir)?;
        let path = journal.unwrap_or_else(|| model_dir.join(JOURNAL_FILE));
        let sessions = SessionStore::open(&path).map_err(|source| ServiceError::Io {
            context: format!("opening journal {}", path.display()),
            source,
        })?;
        Ok(Self { models, sessions })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(api::create_session))
        .route("/v1/sessions/{id}", get(api::get_session))
        .route("/v1/sessions/{id}/turns", post(api::add_turn))
        .route("/v1/sessions/{id}/references/{author}", put(api::set_references))
        .route("/v1/sessions/{id}/sample", post(api::sample_next))
        .route("/v1/score", post(api::score))
        .route("/v1/models", get(api::list_models))
        .with_state(state)
}

/// Bind address from `CONVCTL_BIND`, else the default.
pub fn bind_addr() -> Result<SocketAddr, ServiceError> {
    let raw = std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.to_string());
    raw.parse().map_err(|_| ServiceError::Bind(raw))
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Io {
            context: format!("binding {addr}"),
            source,
        })?;
    tracing::info!(%addr, models = state.models.list().len(), "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| ServiceError::Io {
            context: "serving".into(),
            source,
        })
}
