//! HTTP labeling backend for interactive active learning.
//!
//! Each session runs the same loop as oracle mode, except that labels arrive
//! over HTTP. A worker task per session applies submissions in arrival order
//! and runs adaptation rounds on a blocking thread; handlers only read
//! published snapshots. Endpoints and bodies are described in `API.md`.

pub mod api;
pub mod error;
pub mod render;
mod worker;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use agile_core::active::{ActiveConfig, ActiveSession};
use agile_core::model::{Learner, ParamSet};
use agile_core::tasks::TaskDataset;
use axum::extract::{Path, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use tokio::sync::oneshot;

use api::{CreateSession, LabelAck, LabelSubmission, QueriesResponse, SessionCreated, StatusResponse};
use error::ApiError;
use worker::{Command, Handle};

pub use worker::{SessionView, LABEL_NAMES};

/// What every session of a server shares.
pub struct ServiceConfig<L> {
    pub learner: L,
    pub theta: ParamSet,
    pub tasks: Vec<TaskDataset>,
    /// Used when a create request does not bring its own.
    pub active: ActiveConfig,
    /// Sessions are snapshotted to `dir/<session id>` after every round.
    pub snapshot_dir: Option<PathBuf>,
}

struct Inner<L> {
    learner: L,
    theta: ParamSet,
    tasks: HashMap<String, Arc<TaskDataset>>,
    active: ActiveConfig,
    snapshot_dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Handle>>,
}

pub struct AppState<L> {
    inner: Arc<Inner<L>>,
}

impl<L> Clone for AppState<L> {
    fn clone(&self) -> Self {
        AppState {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<L: Learner + Clone + 'static> AppState<L> {
    pub fn new(config: ServiceConfig<L>) -> Self {
        let tasks = config
            .tasks
            .into_iter()
            .map(|t| (t.task_id().to_string(), Arc::new(t)))
            .collect();
        AppState {
            inner: Arc::new(Inner {
                learner: config.learner,
                theta: config.theta,
                tasks,
                active: config.active,
                snapshot_dir: config.snapshot_dir,
                sessions: RwLock::new(HashMap::new()),
            }),
        }
    }

    /// Latest published snapshot of a session.
    pub fn view(&self, id: &str) -> Result<Arc<SessionView>, ApiError> {
        Ok(self.handle(id)?.view.borrow().clone())
    }

    fn handle(&self, id: &str) -> Result<Handle, ApiError> {
        let sessions = self.inner.sessions.read().expect("session table lock poisoned");
        sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn create(&self, req: CreateSession) -> Result<SessionCreated, ApiError> {
        let task = self
            .inner
            .tasks
            .get(&req.task_id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("task {}", req.task_id)))?;
        let config = req.active.unwrap_or_else(|| self.inner.active.clone());
        let composite = req.composite.unwrap_or_else(|| render::default_composite(task.channels()));
        if let Some(&bad) = composite.iter().find(|&&c| c >= task.channels()) {
            return Err(ApiError::BadRequest(format!("composite channel {bad} >= {} channels", task.channels())));
        }
        let session = ActiveSession::new(self.inner.learner.clone(), &self.inner.theta, task, config, req.seed)?;
        let status = session.status();
        let session_id = uuid::Uuid::new_v4().simple().to_string();
        let handle = worker::spawn(session_id.clone(), session, composite, self.inner.snapshot_dir.clone())?;
        self.inner
            .sessions
            .write()
            .expect("session table lock poisoned")
            .insert(session_id.clone(), handle);
        log::info!("session {session_id} created for task {}", req.task_id);
        Ok(SessionCreated {
            session_id,
            task_id: req.task_id,
            status,
        })
    }

    pub async fn submit(&self, id: &str, sub: LabelSubmission) -> Result<LabelAck, ApiError> {
        let handle = self.handle(id)?;
        let (tx, rx) = oneshot::channel();
        handle
            .commands
            .send(Command::Submit(sub, tx))
            .await
            .map_err(|_| ApiError::Internal(format!("session {id} worker stopped")))?;
        rx.await
            .map_err(|_| ApiError::Internal(format!("session {id} worker dropped the request")))?
    }

    /// Resolves once the session has published a snapshot newer than `version`.
    pub async fn changed_since(&self, id: &str, version: u64) -> Result<Arc<SessionView>, ApiError> {
        let mut rx = self.handle(id)?.view;
        let view = rx
            .wait_for(|v| v.status.version > version)
            .await
            .map_err(|_| ApiError::Internal(format!("session {id} worker stopped")))?;
        Ok(view.clone())
    }

    pub fn task_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.tasks.keys().cloned().collect();
        ids.sort();
        ids
    }
}

async fn list_tasks<L: Learner + Clone + 'static>(State(s): State<AppState<L>>) -> Json<Vec<String>> {
    Json(s.task_ids())
}

async fn create_session<L: Learner + Clone + 'static>(
    State(s): State<AppState<L>>,
    Json(req): Json<CreateSession>,
) -> Result<Json<SessionCreated>, ApiError> {
    s.create(req).map(Json)
}

async fn get_queries<L: Learner + Clone + 'static>(
    State(s): State<AppState<L>>,
    Path(id): Path<String>,
) -> Result<Json<QueriesResponse>, ApiError> {
    Ok(Json(s.view(&id)?.queries.clone()))
}

async fn post_label<L: Learner + Clone + 'static>(
    State(s): State<AppState<L>>,
    Path(id): Path<String>,
    Json(sub): Json<LabelSubmission>,
) -> Result<Json<LabelAck>, ApiError> {
    s.submit(&id, sub).await.map(Json)
}

async fn get_status<L: Learner + Clone + 'static>(
    State(s): State<AppState<L>>,
    Path(id): Path<String>,
) -> Result<Json<StatusResponse>, ApiError> {
    Ok(Json(s.view(&id)?.status.clone()))
}

pub fn router<L: Learner + Clone + 'static>(state: AppState<L>) -> Router {
    Router::new()
        .route("/tasks", get(list_tasks::<L>))
        .route("/sessions", post(create_session::<L>))
        .route("/sessions/{id}/queries", get(get_queries::<L>))
        .route("/sessions/{id}/labels", post(post_label::<L>))
        .route("/sessions/{id}/status", get(get_status::<L>))
        .with_state(state)
}

/// Serve until ctrl-c.
pub async fn serve<L: Learner + Clone + 'static>(addr: SocketAddr, state: AppState<L>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
