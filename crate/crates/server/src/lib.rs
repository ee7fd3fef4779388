//! HTTP front end for the crowd vote store of one run directory.
//!
//! Voters are identified by an opaque cookie token handed out on first
//! contact; one vote per token per task, a repeat replaces the earlier
//! choice.

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use shadowpipe_core::crowd::{CrowdError, CrowdStore, VoteTally, VoteTask};
use shadowpipe_core::detect::NEGATIVE_CLASS;
use shadowpipe_core::engine::stages::CROWD_DIR;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

pub const VOTER_COOKIE: &str = "shadowpipe_voter";

pub struct AppState {
    run_dir: PathBuf,
    store: Mutex<CrowdStore>,
    seed: u64,
}

impl AppState {
    pub fn open(run_dir: &Path, seed: u64) -> Result<Self, CrowdError> {
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            store: Mutex::new(CrowdStore::open(&run_dir.join(CROWD_DIR))?),
            seed,
        })
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/tasks", post(publish))
        .route("/api/tasks/next", get(next_task))
        .route("/api/images/{crop_id}", get(image))
        .route("/api/votes", post(vote))
        .route("/api/export", get(export))
        .route("/api/progress", get(progress))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(run_dir: &Path, addr: SocketAddr, seed: u64) -> std::io::Result<()> {
    let state = AppState::open(run_dir, seed).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("vote service for {} on http://{}", run_dir.display(), listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<CrowdError> for ApiError {
    fn from(e: CrowdError) -> Self {
        let status = match &e {
            CrowdError::UnknownTask(_) => StatusCode::NOT_FOUND,
            CrowdError::InvalidChoice { .. } | CrowdError::InvalidTask(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn voter_of(headers: &HeaderMap) -> Option<String> {
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, v)| *k == VOTER_COOKIE && !v.is_empty())
        .map(|(_, v)| v.to_string())
}

/// The request's voter token, minting one (and a cookie to carry it) when
/// absent.
fn voter(headers: &HeaderMap) -> (String, Option<HeaderValue>) {
    match voter_of(headers) {
        Some(v) => (v, None),
        None => {
            let v = uuid::Uuid::new_v4().simple().to_string();
            let cookie = format!("{VOTER_COOKIE}={v}; Path=/; HttpOnly; SameSite=Lax");
            (v, Some(HeaderValue::from_str(&cookie).expect("ascii cookie")))
        }
    }
}

fn with_cookie(cookie: Option<HeaderValue>, resp: impl IntoResponse) -> Response {
    let mut r = resp.into_response();
    if let Some(c) = cookie {
        r.headers_mut().insert(header::SET_COOKIE, c);
    }
    r
}

// FNV-1a; stable across builds so a token always walks the same sequence
fn session_seed(base: u64, token: &str) -> u64 {
    token
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325 ^ base, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn check_task(t: &VoteTask) -> Result<(), String> {
    let negatives = t.choices.iter().filter(|c| c.as_str() == NEGATIVE_CLASS).count();
    if negatives != 1 {
        return Err(format!("{}: choices must contain \"{NEGATIVE_CLASS}\" exactly once", t.task_id));
    }
    if t.choices.len() < 2 {
        return Err(format!("{}: at least one real class is required", t.task_id));
    }
    if t.min_votes == 0 {
        return Err(format!("{}: min_votes must be positive", t.task_id));
    }
    Ok(())
}

async fn publish(State(s): State<Shared>, Json(tasks): Json<Vec<VoteTask>>) -> Result<Json<serde_json::Value>, ApiError> {
    for t in &tasks {
        check_task(t).map_err(|m| ApiError(StatusCode::UNPROCESSABLE_ENTITY, m))?;
    }
    let mut store = s.store.lock().expect("store lock");
    let fresh = store.publish(&tasks)?;
    let total = store.book().tasks().count();
    Ok(Json(json!({ "published": fresh.len(), "total": total })))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NextTask {
    pub task_id: String,
    pub crop_id: String,
    pub choices: Vec<String>,
    pub min_votes: u32,
    pub total_votes: u32,
    pub image_url: String,
}

async fn next_task(State(s): State<Shared>, headers: HeaderMap) -> Response {
    let (token, cookie) = voter(&headers);
    let store = s.store.lock().expect("store lock");
    let book = store.book();
    let body = book.next_task(&token, session_seed(s.seed, &token)).map(|t| NextTask {
        task_id: t.task_id.clone(),
        crop_id: t.crop_id.clone(),
        choices: t.choices.clone(),
        min_votes: t.min_votes,
        total_votes: book.tally(&t.task_id).map_or(0, |x| x.total_votes),
        image_url: format!("/api/images/{}", t.crop_id),
    });
    match body {
        Some(b) => with_cookie(cookie, Json(b)),
        None => with_cookie(cookie, StatusCode::NO_CONTENT),
    }
}

async fn image(State(s): State<Shared>, UrlPath(crop_id): UrlPath<String>) -> Result<Response, ApiError> {
    let rel = {
        let store = s.store.lock().expect("store lock");
        store
            .book()
            .task_for_crop(&crop_id)
            .map(|t| t.image_path.clone())
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no task for crop {crop_id:?}")))?
    };
    let path = s.run_dir.join(&rel);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteRequest {
    pub task_id: String,
    pub choice: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteResponse {
    /// False when the task was already complete and this voter had not
    /// voted on it; the client should move on.
    pub recorded: bool,
    pub tally: VoteTally,
}

async fn vote(State(s): State<Shared>, headers: HeaderMap, Json(req): Json<VoteRequest>) -> Result<Response, ApiError> {
    let (token, cookie) = voter(&headers);
    let mut store = s.store.lock().expect("store lock");
    store.book().check_vote(&req.task_id, &req.choice)?;
    let current = store.book().tally(&req.task_id).expect("checked");
    let voted_before = store.book().has_voted(&req.task_id, &token);
    let resp = if current.complete && !voted_before {
        VoteResponse {
            recorded: false,
            tally: current,
        }
    } else {
        VoteResponse {
            recorded: true,
            tally: store.record_vote(&req.task_id, &req.choice, &token)?,
        }
    };
    Ok(with_cookie(cookie, Json(resp)))
}

async fn export(State(s): State<Shared>) -> Response {
    let doc = s.store.lock().expect("store lock").book().export();
    ([(header::CONTENT_TYPE, "application/json")], doc.to_json()).into_response()
}

async fn progress(State(s): State<Shared>) -> Json<serde_json::Value> {
    let (complete, incomplete) = s.store.lock().expect("store lock").book().progress();
    Json(json!({ "complete": complete, "incomplete": incomplete, "total": complete + incomplete }))
}
