//! JSON API behind the curation UI: browse records, apply edits with
//! optimistic concurrency, ask the LLM for a revised proposal and accept
//! parts of it.
//!
//! All writes go through one mutex; each successful write is persisted to
//! disk before the in-memory copy is replaced.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use crce_core::curation::{
    apply_edit, diff_proposal, diff_to_edits, list_records, CurationError, EditCommand, EditOp, ProposalDiff,
    RecordFilter, RecordSummary,
};
use crce_core::dataset::{
    save_dataset, validate_record, Category, ConceptRecord, CorefConceptDataset, DatasetError, RecordState, Violation,
};
use crce_core::generator::{ChatClient, GenerationError, GenerationSession, Proposal};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

pub const DEFAULT_UI_ORIGIN: &str = "http://localhost:5173";

pub struct AppState {
    dataset: Mutex<CorefConceptDataset>,
    path: Option<PathBuf>,
    chat: Option<Arc<dyn ChatClient>>,
    sessions: Mutex<HashMap<String, (u64, GenerationSession)>>,
}

impl AppState {
    /// `path`, when set, receives the whole dataset after every accepted write.
    pub fn new(dataset: CorefConceptDataset, path: Option<PathBuf>, chat: Option<Arc<dyn ChatClient>>) -> Self {
        Self {
            dataset: Mutex::new(dataset),
            path,
            chat,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn snapshot(&self) -> CorefConceptDataset {
        self.dataset.lock().expect("dataset lock").clone()
    }

    /// Runs `f` on a copy of the dataset and commits (disk, then memory) only
    /// if it succeeds.
    fn write<T>(&self, f: impl FnOnce(&mut CorefConceptDataset) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let mut guard = self.dataset.lock().expect("dataset lock");
        let mut next = guard.clone();
        let out = f(&mut next)?;
        if let Some(path) = &self.path {
            save_dataset(&next, path).map_err(ApiError::persist)?;
        }
        *guard = next;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_revision: Option<u64>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.into(),
                message: message.into(),
                violations: Vec::new(),
                current_revision: None,
            },
        }
    }

    fn persist(e: DatasetError) -> Self {
        tracing::error!(error = %e, "failed to persist dataset");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "PERSIST_FAILED", e.to_string())
    }
}

impl From<CurationError> for ApiError {
    fn from(e: CurationError) -> Self {
        let status = match &e {
            CurationError::NotFound(_) => StatusCode::NOT_FOUND,
            CurationError::RevisionConflict { .. } => StatusCode::CONFLICT,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        let mut err = Self::new(status, e.code(), e.to_string());
        match e {
            CurationError::ApprovalBlocked(v) => err.body.violations = v,
            CurationError::RevisionConflict { current, .. } => err.body.current_revision = Some(current),
            _ => {}
        }
        err
    }
}

impl From<GenerationError> for ApiError {
    fn from(e: GenerationError) -> Self {
        let status = match &e {
            GenerationError::EmptyFeedback | GenerationError::EmptyTarget => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::BAD_GATEWAY,
        };
        Self::new(status, "GENERATION_FAILED", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct ListQuery {
    pub state: Option<RecordState>,
    pub category: Option<Category>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub id: String,
    pub record: ConceptRecord,
    pub violations: Vec<Violation>,
}

impl RecordView {
    fn of(record: ConceptRecord) -> Self {
        Self {
            id: record.id(),
            violations: validate_record(&record),
            record,
        }
    }
}

/// An edit as posted by the UI; the record comes from the URL.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditBody {
    #[serde(default)]
    pub path: String,
    pub operation: EditOp,
    #[serde(default)]
    pub value: serde_json::Value,
    pub base_revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproveBody {
    pub base_revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegenerateBody {
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegenerateResponse {
    pub round: usize,
    pub proposals: Vec<Proposal>,
    /// Diff against the sense matching the record's disambiguation (or the first).
    pub diff: ProposalDiff,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptBody {
    pub diff: ProposalDiff,
    /// Indices into `diff.entries`.
    pub accepted: Vec<usize>,
}

pub fn router(state: Arc<AppState>, ui_origin: &str) -> Router {
    let origin = HeaderValue::from_str(ui_origin).unwrap_or_else(|_| HeaderValue::from_static(DEFAULT_UI_ORIGIN));
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/records", get(list))
        .route("/records/:id", get(show))
        .route("/records/:id/edits", post(edit))
        .route("/records/:id/approve", post(approve))
        .route("/records/:id/regenerate", post(regenerate))
        .route("/records/:id/accept", post(accept))
        .layer(cors)
        .with_state(state)
}

async fn list(State(s): State<Arc<AppState>>, Query(q): Query<ListQuery>) -> Json<Vec<RecordSummary>> {
    let filter = RecordFilter {
        state: q.state,
        category: q.category,
    };
    Json(list_records(&s.dataset.lock().expect("dataset lock"), &filter))
}

fn find(s: &AppState, id: &str) -> Result<ConceptRecord, ApiError> {
    let ds = s.dataset.lock().expect("dataset lock");
    ds.find(id)
        .cloned()
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", e.to_string()))
}

async fn show(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<RecordView>, ApiError> {
    Ok(Json(RecordView::of(find(&s, &id)?)))
}

fn run_edit(s: &AppState, cmd: EditCommand) -> Result<Json<RecordView>, ApiError> {
    let out = s.write(|ds| Ok(apply_edit(ds, &cmd)?))?;
    tracing::info!(record = %cmd.record, op = ?cmd.operation, revision = out.record.revision, "edit applied");
    Ok(Json(RecordView::of(out.record)))
}

async fn edit(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<EditBody>,
) -> Result<Json<RecordView>, ApiError> {
    run_edit(
        &s,
        EditCommand {
            record: id,
            path: body.path,
            operation: body.operation,
            value: body.value,
            base_revision: body.base_revision,
        },
    )
}

async fn approve(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<ApproveBody>,
) -> Result<Json<RecordView>, ApiError> {
    run_edit(
        &s,
        EditCommand {
            record: id,
            path: String::new(),
            operation: EditOp::ApproveRecord,
            value: serde_json::Value::Null,
            base_revision: body.base_revision,
        },
    )
}

async fn regenerate(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<RegenerateBody>,
) -> Result<Json<RegenerateResponse>, ApiError> {
    let chat = s
        .chat
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "NO_GENERATOR", "no LLM client configured"))?;
    let record = find(&s, &id)?;
    // keep the conversation going as long as nobody edited the record meanwhile
    let session = match s.sessions.lock().expect("session lock").get(&id) {
        Some((rev, sess)) if *rev == record.revision => sess.clone(),
        _ => GenerationSession::resume_from_record(&record)?,
    };
    let next = tokio::task::spawn_blocking(move || session.refine(chat.as_ref(), &body.feedback))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))??;
    let proposals = next.latest().to_vec();
    let chosen = proposals
        .iter()
        .find(|p| p.sense.is_some() && p.sense == record.disambiguation)
        .unwrap_or(&proposals[0]);
    let diff = diff_proposal(&record, chosen);
    let round = next.round;
    s.sessions.lock().expect("session lock").insert(id, (record.revision, next));
    Ok(Json(RegenerateResponse { round, proposals, diff }))
}

/// Applies the accepted subset of a diff as one atomic write.
async fn accept(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<AcceptBody>,
) -> Result<Json<RecordView>, ApiError> {
    if body.diff.record != id {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "INVALID_VALUE",
            format!("diff is for {:?}, not {id:?}", body.diff.record),
        ));
    }
    let record = s.write(|ds| {
        let current = ds.find(&id).map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "NOT_FOUND", e.to_string()))?;
        if current.revision != body.diff.base_revision {
            return Err(CurationError::RevisionConflict {
                current: current.revision,
                given: body.diff.base_revision,
            }
            .into());
        }
        let edits = diff_to_edits(current, &body.diff, &body.accepted)?;
        let mut last = current.clone();
        for e in &edits {
            last = apply_edit(ds, e)?.record;
        }
        Ok(last)
    })?;
    Ok(Json(RecordView::of(record)))
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, ui_origin: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "curation service listening");
    axum::serve(listener, router(state, ui_origin))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
