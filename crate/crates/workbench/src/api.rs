//! JSON-over-HTTP access to the store, and the curation endpoint.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/runs` | run summaries with parent ids |
//! | GET | `/runs/{id}` | manifest |
//! | GET | `/runs/{id}/experiments/{eid}/{artifact}` | one experiment artifact |
//! | GET | `/runs/{id}/meta` | consensus clustering result |
//! | GET | `/runs/{id}/lineage` | ancestors and curation log |
//! | GET | `/runs/{id}/report/{format}` | rendered report |
//! | POST | `/runs/{id}/curations` | create a curation child (202) |

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};

use stratify_core::curation::{LogEntry, RerunScope};

use crate::bundle::{ReportBundle, EXPERIMENT_ARTIFACTS};
use crate::curate::{execute_child, plan_child, running_manifest, CurationRequest};
use crate::pipeline::failed_manifest;
use crate::report::{render_string, ReportFormat};
use crate::store::{RunSummary, Store};
use crate::WorkbenchError;

#[derive(Clone)]
pub struct AppState {
    pub store: Store,
    /// Held while a curation child is validated and reserved.
    write_lock: Arc<Mutex<()>>,
}

pub struct ApiError(WorkbenchError);

impl From<WorkbenchError> for ApiError {
    fn from(e: WorkbenchError) -> Self {
        ApiError(e)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub status: u16,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            WorkbenchError::NotFound(_) => StatusCode::NOT_FOUND,
            WorkbenchError::InvalidAction(_) | WorkbenchError::Curation(_) | WorkbenchError::Config(_) => {
                StatusCode::BAD_REQUEST
            }
            WorkbenchError::RulesConflict { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: self.0.to_string(),
            status: status.as_u16(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn raw_json(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> crate::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(WorkbenchError::Format(format!("task failed: {e}"))))?
        .map_err(ApiError)
}

async fn list_runs(State(s): State<AppState>) -> ApiResult<Json<Vec<RunSummary>>> {
    Ok(Json(blocking(move || s.store.list_runs()).await?))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let m = blocking(move || s.store.manifest(&id)).await?;
    Ok(Json(m).into_response())
}

async fn get_artifact(
    State(s): State<AppState>,
    Path((id, eid, artifact)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    let known = EXPERIMENT_ARTIFACTS.contains(&artifact.as_str())
        || artifact == "evaluated_assignment"
        || artifact == "k_selection";
    if !known {
        return Err(WorkbenchError::NotFound(format!("artifact '{artifact}'")).into());
    }
    let bytes = blocking(move || {
        let m = s.store.manifest(&id)?;
        let e = m
            .experiment(&eid)
            .ok_or_else(|| WorkbenchError::NotFound(format!("experiment '{eid}' in run '{id}'")))?;
        let h = e
            .artifacts
            .get(&artifact)
            .ok_or_else(|| WorkbenchError::NotFound(format!("{artifact} for experiment '{eid}'")))?;
        s.store.get_bytes(h)
    })
    .await?;
    Ok(raw_json(bytes))
}

async fn get_meta(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || {
        let m = s.store.manifest(&id)?;
        let h = m
            .artifacts
            .get("meta")
            .ok_or_else(|| WorkbenchError::NotFound(format!("meta result for run '{id}'")))?;
        s.store.get_bytes(h)
    })
    .await?;
    Ok(raw_json(bytes))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Lineage {
    pub run_id: String,
    /// Root first, ending with this run.
    pub chain: Vec<RunSummary>,
    pub log: Vec<LogEntry>,
}

async fn get_lineage(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Lineage>> {
    let l = blocking(move || {
        Ok(Lineage {
            chain: s.store.lineage(&id)?,
            log: s.store.log(&id)?.entries,
            run_id: id,
        })
    })
    .await?;
    Ok(Json(l))
}

async fn get_report(State(s): State<AppState>, Path((id, format)): Path<(String, String)>) -> ApiResult<Response> {
    let format: ReportFormat = format.parse()?;
    let text = blocking(move || render_string(&ReportBundle::load(&s.store, &id)?, format)).await?;
    let ctype = match format {
        ReportFormat::Json => "application/json",
        ReportFormat::Html => "text/html; charset=utf-8",
        ReportFormat::Text => "text/plain; charset=utf-8",
    };
    Ok(([(header::CONTENT_TYPE, ctype)], text).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub run_id: String,
    pub parent: String,
    pub scope: RerunScope,
    pub status: String,
}

async fn post_curation(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: CurationRequest =
        serde_json::from_slice(&body).map_err(|e| WorkbenchError::InvalidAction(format!("request body: {e}")))?;
    let store = s.store.clone();
    let lock = s.write_lock.clone();
    let plan = blocking(move || {
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let plan = plan_child(&store, &id, &req, Utc::now())?;
        running_manifest(&store, &plan)?;
        Ok(plan)
    })
    .await?;
    let accepted = Accepted {
        run_id: plan.run_id.clone(),
        parent: plan.parent.run_id.clone(),
        scope: plan.scope,
        status: "running".into(),
    };
    let store = s.store.clone();
    tokio::task::spawn_blocking(move || {
        if let Err(e) = execute_child(&store, &plan) {
            let _ = failed_manifest(&store, &plan.config, &plan.run_id, &plan.options(), e.to_string());
        }
    });
    Ok((StatusCode::ACCEPTED, Json(accepted)).into_response())
}

pub fn router(store: Store) -> Router {
    let state = AppState {
        store,
        write_lock: Arc::new(Mutex::new(())),
    };
    Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/experiments/{eid}/{artifact}", get(get_artifact))
        .route("/runs/{id}/meta", get(get_meta))
        .route("/runs/{id}/lineage", get(get_lineage))
        .route("/runs/{id}/report/{format}", get(get_report))
        .route("/runs/{id}/curations", post(post_curation))
        .with_state(state)
}

pub async fn serve(store: Store, addr: SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(store)).await?;
    Ok(())
}
