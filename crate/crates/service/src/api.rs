//! Request and response bodies plus handlers.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use convctl_core::evalgen::{perplexity, sample_turn, SamplerConfig};
use convctl_core::extract::{ConversationPath, ReferenceTuple, Turn, UserReferenceStore, DEFAULT_REFERENCES_PER_USER};
use convctl_core::Execution;

use crate::error::ApiError;
use crate::models::{ModelInfo, ModelSlot};
use crate::sessions::Session;
use crate::AppState;

/// Parses a JSON body, reporting the failing field path. `status` picks
/// between 400 (malformed request) and 422 (schema violation).
fn parse<T: DeserializeOwned>(body: &Bytes, status: StatusCode) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let err = if status == StatusCode::UNPROCESSABLE_ENTITY {
            ApiError::invalid(inner.to_string())
        } else {
            ApiError::bad_request(inner.to_string())
        };
        if path == "." {
            err
        } else {
            err.with_field(path)
        }
    })
}

fn json_bytes<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let body = serde_json::to_vec(value).expect("response serializes");
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn io_error(e: std::io::Error) -> ApiError {
    ApiError::internal(format!("session journal: {e}"))
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TurnInput {
    pub author: String,
    pub text: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceInput {
    #[serde(default)]
    pub parent: Option<String>,
    pub reply: String,
    #[serde(default)]
    pub reply_id: Option<String>,
    #[serde(default)]
    pub score: i64,
}

fn to_tuples(author: &str, refs: &[ReferenceInput], field: &str) -> Result<Vec<ReferenceTuple>, ApiError> {
    if refs.len() > DEFAULT_REFERENCES_PER_USER {
        return Err(ApiError::invalid(format!(
            "{} references for {author}; at most {DEFAULT_REFERENCES_PER_USER} are allowed per speaker",
            refs.len()
        ))
        .with_field(field));
    }
    refs.iter()
        .enumerate()
        .map(|(i, r)| {
            if r.reply.trim().is_empty() {
                return Err(ApiError::invalid("reference reply is empty").with_field(format!("{field}[{i}].reply")));
            }
            Ok(ReferenceTuple {
                parent: r.parent.clone().filter(|p| !p.trim().is_empty()),
                reply: r.reply.clone(),
                reply_id: r.reply_id.clone().unwrap_or_else(|| format!("ref{i}")),
                score: r.score,
            })
        })
        .collect()
}

fn check_text(text: &str, field: &str) -> Result<(), ApiError> {
    if text.trim().is_empty() {
        return Err(ApiError::invalid("turn text is empty").with_field(field));
    }
    Ok(())
}

fn model_slot(app: &AppState, id: &str) -> Result<Arc<ModelSlot>, ApiError> {
    app.models
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown model {id:?}")).with_field("model_id"))
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub model_id: String,
    pub speakers: Vec<String>,
    #[serde(default)]
    pub turns: Vec<TurnInput>,
    #[serde(default)]
    pub references: BTreeMap<String, Vec<ReferenceInput>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
}

pub async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSessionRequest = parse(&body, StatusCode::BAD_REQUEST)?;
    model_slot(&app, &req.model_id)?;
    if req.speakers.is_empty() {
        return Err(ApiError::invalid("at least one speaker is required").with_field("speakers"));
    }
    for (i, s) in req.speakers.iter().enumerate() {
        if s.trim().is_empty() || req.speakers[..i].contains(s) {
            return Err(ApiError::invalid(format!("speaker {s:?} is empty or repeated")).with_field(format!("speakers[{i}]")));
        }
    }
    let session_id = uuid::Uuid::new_v4().simple().to_string();
    let mut session = Session {
        session_id: session_id.clone(),
        model_id: req.model_id,
        speakers: req.speakers,
        conversation: ConversationPath {
            conversation_id: session_id.clone(),
            post_id: session_id.clone(),
            turns: Vec::new(),
        },
        references: UserReferenceStore::default(),
        created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    for (i, t) in req.turns.iter().enumerate() {
        if !session.has_speaker(&t.author) {
            return Err(ApiError::invalid(format!("author {:?} is not a speaker", t.author)).with_field(format!("turns[{i}].author")));
        }
        check_text(&t.text, &format!("turns[{i}].text"))?;
        session.push_turn(&t.author, &t.text);
    }
    for (author, refs) in &req.references {
        if !session.has_speaker(author) {
            return Err(ApiError::invalid(format!("references for unknown speaker {author:?}")).with_field(format!("references.{author}")));
        }
        let tuples = to_tuples(author, refs, &format!("references.{author}"))?;
        session.references.insert(author.clone(), tuples);
    }
    app.sessions.create(session).map_err(io_error)?;
    Ok(json_bytes(StatusCode::CREATED, &CreateSessionResponse { session_id }))
}

fn session_handle(app: &AppState, id: &str) -> Result<crate::sessions::SessionHandle, ApiError> {
    app.sessions
        .get(id)
        .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
}

pub async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let handle = session_handle(&app, &id)?;
    let snapshot = handle.lock().await.clone();
    Ok(json_bytes(StatusCode::OK, &snapshot))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AddTurnResponse {
    pub turn_index: usize,
    /// Tokens of the new turn under the session model's tokenizer.
    pub token_count: usize,
    pub turns: Vec<Turn>,
}

pub async fn add_turn(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let handle = session_handle(&app, &id)?;
    let req: TurnInput = parse(&body, StatusCode::BAD_REQUEST)?;
    let mut session = handle.lock().await;
    if !session.has_speaker(&req.author) {
        return Err(ApiError::invalid(format!("author {:?} is not a speaker of this session", req.author)).with_field("author"));
    }
    check_text(&req.text, "text")?;
    let slot = model_slot(&app, &session.model_id)?;
    let token_count = slot.model.vocab.encode(&req.text).len();
    app.sessions.add_turn(&mut session, &req.author, &req.text).map_err(io_error)?;
    let resp = AddTurnResponse {
        turn_index: session.conversation.turns.len() - 1,
        token_count,
        turns: session.conversation.turns.clone(),
    };
    Ok(json_bytes(StatusCode::OK, &resp))
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SetReferencesRequest {
    pub references: Vec<ReferenceInput>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetReferencesResponse {
    pub author: String,
    pub count: usize,
}

pub async fn set_references(
    State(app): State<Arc<AppState>>,
    Path((id, author)): Path<(String, String)>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let handle = session_handle(&app, &id)?;
    let req: SetReferencesRequest = parse(&body, StatusCode::BAD_REQUEST)?;
    let mut session = handle.lock().await;
    if !session.has_speaker(&author) {
        return Err(ApiError::invalid(format!("{author:?} is not a speaker of this session")).with_field("author"));
    }
    let tuples = to_tuples(&author, &req.references, "references")?;
    let count = tuples.len();
    app.sessions.set_references(&mut session, &author, tuples).map_err(io_error)?;
    Ok(json_bytes(StatusCode::OK, &SetReferencesResponse { author, count }))
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub target: String,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_new_tokens: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub greedy: Option<bool>,
}

impl SampleRequest {
    pub fn sampler(&self) -> Result<SamplerConfig, ApiError> {
        let d = SamplerConfig::default();
        let s = SamplerConfig {
            top_p: self.top_p.unwrap_or(d.top_p),
            temperature: self.temperature.unwrap_or(d.temperature),
            max_new_tokens: self.max_new_tokens.unwrap_or(d.max_new_tokens),
            seed: self.seed.unwrap_or(d.seed),
            greedy: self.greedy.unwrap_or(d.greedy),
        };
        let field = if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            "top_p"
        } else if !(s.temperature > 0.0 && s.temperature.is_finite()) {
            "temperature"
        } else {
            "max_new_tokens"
        };
        s.validate().map_err(|e| ApiError::invalid(e.to_string()).with_field(field))?;
        Ok(s)
    }
}

/// Responds with the generated turn exactly as the library returns it.
pub async fn sample_next(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let handle = session_handle(&app, &id)?;
    let req: SampleRequest = parse(&body, StatusCode::BAD_REQUEST)?;
    let mut session = handle.lock().await;
    if !session.has_speaker(&req.target) {
        return Err(ApiError::invalid(format!("target {:?} is not a speaker of this session", req.target)).with_field("target"));
    }
    let sampler = req.sampler()?;
    let slot = model_slot(&app, &session.model_id)?;
    let conv = session.conversation.clone();
    let store = session.references.clone();
    let target = req.target.clone();
    let turn = {
        let _lane = slot.lane.lock().await;
        let model = slot.model.clone();
        tokio::task::spawn_blocking(move || sample_turn(&model, &conv, &store, &target, &sampler))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??
    };
    app.sessions
        .add_turn(&mut session, &turn.author, &turn.text)
        .map_err(io_error)?;
    Ok(json_bytes(StatusCode::OK, &turn))
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreTurn {
    #[serde(default)]
    pub comment_id: Option<String>,
    pub author: String,
    pub text: String,
    #[serde(default)]
    pub score: i64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConversation {
    #[serde(default)]
    pub conversation_id: Option<String>,
    pub turns: Vec<ScoreTurn>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub model_id: String,
    pub conversation: ScoreConversation,
    #[serde(default)]
    pub references: BTreeMap<String, Vec<ReferenceInput>>,
}

impl ScoreRequest {
    /// The conversation and store the library scores.
    pub fn to_inputs(&self) -> Result<(ConversationPath, UserReferenceStore), ApiError> {
        if self.conversation.turns.is_empty() {
            return Err(ApiError::invalid("conversation has no turns").with_field("conversation.turns"));
        }
        let id = self.conversation.conversation_id.clone().unwrap_or_else(|| "score".into());
        let mut turns = Vec::with_capacity(self.conversation.turns.len());
        for (i, t) in self.conversation.turns.iter().enumerate() {
            if t.author.trim().is_empty() {
                return Err(ApiError::invalid("turn author is empty").with_field(format!("conversation.turns[{i}].author")));
            }
            check_text(&t.text, &format!("conversation.turns[{i}].text"))?;
            turns.push(Turn {
                comment_id: t.comment_id.clone().unwrap_or_else(|| format!("t{i}")),
                author: t.author.clone(),
                text: t.text.clone(),
                score: t.score,
            });
        }
        let mut store = UserReferenceStore::default();
        for (author, refs) in &self.references {
            store.insert(author.clone(), to_tuples(author, refs, &format!("references.{author}"))?);
        }
        let conv = ConversationPath {
            conversation_id: id.clone(),
            post_id: id,
            turns,
        };
        Ok((conv, store))
    }
}

/// Stateless scoring; the body is the library's report serialized as is.
pub async fn score(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: ScoreRequest = parse(&body, StatusCode::UNPROCESSABLE_ENTITY)?;
    let slot = model_slot(&app, &req.model_id)?;
    let (conv, store) = req.to_inputs()?;
    let report = {
        let _lane = slot.lane.lock().await;
        let model = slot.model.clone();
        tokio::task::spawn_blocking(move || perplexity(&model, &[conv], &store, Execution::Sequential))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??
    };
    Ok(json_bytes(StatusCode::OK, &report))
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelInfo>,
}

pub async fn list_models(State(app): State<Arc<AppState>>) -> Json<ModelsResponse> {
    Json(ModelsResponse {
        models: app.models.list(),
    })
}
