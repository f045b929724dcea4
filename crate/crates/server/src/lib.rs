//! Localhost HTTP/JSON view of a project directory.
//!
//! GET handlers return the stored documents byte for byte. A store that has
//! not been written yet is served as its default document, laid out the same
//! way the store would write it.

use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use graphaudit_core::beliefs::HypothesisDoc;
use graphaudit_core::graph::{GraphSummary, SUMMARY_FILE};
use graphaudit_core::inbox::{Inbox, SteeringNote};
use graphaudit_core::planning::{CoverageIndex, PLAN_FILE};
use graphaudit_core::project::Project;
use graphaudit_core::session::STATUS_FILE;
use graphaudit_core::storage::to_document_bytes;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

pub const DEFAULT_PORT: u16 = 8737;

#[derive(Debug, Deserialize)]
pub struct InboxPost {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InboxCreated {
    pub id: String,
    pub note: SteeringNote,
}

#[derive(Debug, Deserialize)]
pub struct SessionQuery {
    pub session: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        #[derive(Serialize)]
        struct Body {
            error: String,
        }
        (self.status, Json(Body { error: self.message })).into_response()
    }
}

impl From<graphaudit_core::Error> for ApiError {
    fn from(e: graphaudit_core::Error) -> ApiError {
        use graphaudit_core::Error as E;
        let status = match e {
            E::Validation(_) => StatusCode::BAD_REQUEST,
            E::UnknownGraph(_) => StatusCode::NOT_FOUND,
            E::LockTimeout { .. } => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], Bytes::from(bytes)).into_response()
}

async fn read_or(path: PathBuf, default: impl FnOnce() -> graphaudit_core::Result<Vec<u8>>) -> Result<Response, ApiError> {
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(json_bytes(bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(json_bytes(default()?)),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("reading {}: {e}", path.display()),
        )),
    }
}

async fn read_required(path: PathBuf, what: String) -> Result<Response, ApiError> {
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok(json_bytes(bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::not_found(format!("{what} not found"))),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("reading {}: {e}", path.display()),
        )),
    }
}

async fn graphs(State(p): State<Project>) -> Result<Response, ApiError> {
    read_or(p.graphs_dir().join(SUMMARY_FILE), || to_document_bytes(&GraphSummary::default())).await
}

async fn graph(State(p): State<Project>, UrlPath(name): UrlPath<String>) -> Result<Response, ApiError> {
    let store = p.graphs();
    if name.is_empty() || store.path_for(&name) == p.graphs_dir().join(SUMMARY_FILE) {
        return Err(ApiError::not_found(format!("graph {name} not found")));
    }
    read_required(store.path_for(&name), format!("graph {name}")).await
}

async fn hypotheses(State(p): State<Project>) -> Result<Response, ApiError> {
    read_or(p.hypotheses_path(), || to_document_bytes(&HypothesisDoc::default())).await
}

async fn coverage(State(p): State<Project>) -> Result<Response, ApiError> {
    read_or(p.coverage_path(), || to_document_bytes(&CoverageIndex::default())).await
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn modified(path: &Path) -> Option<SystemTime> {
    std::fs::metadata(path).and_then(|m| m.modified()).ok()
}

/// The session whose status or plan document changed most recently.
pub fn latest_session(project: &Project) -> graphaudit_core::Result<Option<String>> {
    let mut best: Option<(SystemTime, String)> = None;
    for id in project.session_ids()? {
        let dir = project.session_dir(&id);
        let Some(t) = [STATUS_FILE, PLAN_FILE].iter().filter_map(|f| modified(&dir.join(f))).max() else {
            continue;
        };
        if best.as_ref().is_none_or(|(bt, bid)| (t, &id) > (*bt, bid)) {
            best = Some((t, id));
        }
    }
    Ok(best.map(|(_, id)| id))
}

async fn pick_session(p: &Project, q: SessionQuery) -> Result<String, ApiError> {
    match q.session {
        Some(id) if valid_session_id(&id) => Ok(id),
        Some(id) => Err(ApiError::new(StatusCode::BAD_REQUEST, format!("invalid session id {id:?}"))),
        None => {
            let p = p.clone();
            tokio::task::spawn_blocking(move || latest_session(&p))
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??
                .ok_or_else(|| ApiError::not_found("no sessions yet"))
        }
    }
}

async fn plans(State(p): State<Project>, Query(q): Query<SessionQuery>) -> Result<Response, ApiError> {
    let sid = pick_session(&p, q).await?;
    read_required(p.session_dir(&sid).join(PLAN_FILE), format!("plan for session {sid}")).await
}

async fn session_status(State(p): State<Project>, Query(q): Query<SessionQuery>) -> Result<Response, ApiError> {
    let sid = pick_session(&p, q).await?;
    read_required(p.session_dir(&sid).join(STATUS_FILE), format!("status for session {sid}")).await
}

async fn inbox(State(p): State<Project>, Json(body): Json<InboxPost>) -> Result<Response, ApiError> {
    let created = tokio::task::spawn_blocking(move || Inbox::new(p.inbox_dir(), p.files()).add(&body.text))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let (id, note) = created;
    tracing::info!(%id, "steering note queued");
    Ok((StatusCode::CREATED, Json(InboxCreated { id, note })).into_response())
}

pub fn router(project: Project) -> Router {
    Router::new()
        .route("/graphs", get(graphs))
        .route("/graphs/{name}", get(graph))
        .route("/hypotheses", get(hypotheses))
        .route("/coverage", get(coverage))
        .route("/plans", get(plans))
        .route("/session/status", get(session_status))
        .route("/inbox", post(inbox))
        .with_state(project)
}

pub fn localhost(port: u16) -> SocketAddr {
    SocketAddr::from((Ipv4Addr::LOCALHOST, port))
}

/// Serve until the listener fails. Port 0 picks a free port.
pub async fn serve(project: Project, listener: TcpListener) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, root = %project.root().display(), "serving project");
    }
    axum::serve(listener, router(project)).await
}
