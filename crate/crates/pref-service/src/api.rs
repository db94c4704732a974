use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use batkit::rlhf::{PreferenceRecord, Source};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Result, ServiceError};
use crate::store::{ExportFilter, Helpfulness, Stats, Store};

pub struct AppState {
    pub store: RwLock<Store>,
    pub clock: Arc<dyn Clock>,
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/tasks", post(create_task))
        .route("/tasks/next", get(next_task))
        .route("/tasks/{id}", get(get_task))
        .route("/tasks/{id}/judgment", post(submit_judgment))
        .route("/preferences", post(add_preference))
        .route("/export", get(export))
        .route("/stats", get(stats))
        .with_state(state)
}

fn body<T>(r: std::result::Result<Json<T>, JsonRejection>) -> Result<T> {
    r.map(|Json(v)| v)
        .map_err(|e| ServiceError::Validation(e.body_text()))
}

fn query<T>(r: std::result::Result<Query<T>, QueryRejection>) -> Result<T> {
    r.map(|Query(v)| v)
        .map_err(|e| ServiceError::Validation(e.body_text()))
}

fn write(state: &AppState) -> std::sync::RwLockWriteGuard<'_, Store> {
    state.store.write().unwrap_or_else(|e| e.into_inner())
}

fn read(state: &AppState) -> std::sync::RwLockReadGuard<'_, Store> {
    state.store.read().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Deserialize)]
pub struct NewTask {
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub task_id: u64,
}

async fn create_task(
    State(s): State<Shared>,
    req: std::result::Result<Json<NewTask>, JsonRejection>,
) -> Result<Json<Created>> {
    let t = body(req)?;
    let now = s.clock.now();
    let task_id = write(&s).create_task(&t.prompt, &t.response_a, &t.response_b, now)?;
    Ok(Json(Created { task_id }))
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_task(
    State(s): State<Shared>,
    q: std::result::Result<Query<NextQuery>, QueryRejection>,
) -> Result<Response> {
    let q = query(q)?;
    let now = s.clock.now();
    Ok(match write(&s).next_task(&q.annotator, now)? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn get_task(State(s): State<Shared>, Path(id): Path<u64>) -> Result<Response> {
    Ok(Json(read(&s).task(id)?.clone()).into_response())
}

#[derive(Debug, Deserialize)]
pub struct JudgmentRequest {
    pub helpfulness: Helpfulness,
    #[serde(default)]
    pub accept_a: Option<bool>,
    #[serde(default)]
    pub accept_b: Option<bool>,
    pub annotator_id: String,
    /// Makes retries of the same submission return the stored record.
    #[serde(default)]
    pub client_token: Option<String>,
}

async fn submit_judgment(
    State(s): State<Shared>,
    Path(id): Path<u64>,
    req: std::result::Result<Json<JudgmentRequest>, JsonRejection>,
) -> Result<Json<PreferenceRecord>> {
    let j = body(req)?;
    let now = s.clock.now();
    let record = write(&s).submit_judgment(
        id,
        j.helpfulness,
        j.accept_a,
        j.accept_b,
        &j.annotator_id,
        j.client_token,
        now,
    )?;
    Ok(Json(record))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stored {
    pub id: String,
}

async fn add_preference(
    State(s): State<Shared>,
    req: std::result::Result<Json<PreferenceRecord>, JsonRejection>,
) -> Result<Json<Stored>> {
    let r = body(req)?;
    let id = r.id.clone();
    write(&s).add_record(r)?;
    Ok(Json(Stored { id }))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    source: Option<Source>,
    annotator: Option<String>,
    since: Option<DateTime<Utc>>,
    until: Option<DateTime<Utc>>,
}

async fn export(
    State(s): State<Shared>,
    q: std::result::Result<Query<ExportQuery>, QueryRejection>,
) -> Result<Response> {
    let q = query(q)?;
    let filter = ExportFilter {
        source: q.source,
        annotator: q.annotator,
        since: q.since,
        until: q.until,
    };
    let mut out = String::new();
    for r in read(&s).export(&filter) {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
}

async fn stats(State(s): State<Shared>) -> Json<Stats> {
    let now = s.clock.now();
    Json(read(&s).stats(now))
}
