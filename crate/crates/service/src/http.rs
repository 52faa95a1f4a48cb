use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ems_core::scenario::{parse_scenario, Scenario};
use ems_core::telemetry::frame_to_json;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::command::{CommandError, OperatorCommand};
use crate::session::{SessionConfig, SessionManager, SessionStatus, StreamItem, DEFAULT_BUFFER};

#[derive(Clone)]
struct AppState {
    manager: Arc<SessionManager>,
    default_scenario: Arc<Scenario>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    scenario: Option<Value>,
    #[serde(default = "one")]
    speed: f64,
    #[serde(default = "one_u64")]
    decimation: u64,
    buffer: Option<usize>,
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<CommandError> for ApiError {
    fn from(e: CommandError) -> Self {
        let code = match e {
            CommandError::UnknownSession(_) => StatusCode::NOT_FOUND,
            CommandError::Busy | CommandError::Finished => StatusCode::CONFLICT,
            CommandError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self(code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self(StatusCode::UNPROCESSABLE_ENTITY, e.body_text())
    }
}

/// Routes for the operator interface. Sessions without a scenario run `default_scenario`.
pub fn router(manager: Arc<SessionManager>, default_scenario: Scenario) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/:id/command", post(send_command))
        .route("/sessions/:id/state", get(session_state))
        .route("/sessions/:id/telemetry", get(telemetry))
        .with_state(AppState { manager, default_scenario: Arc::new(default_scenario) })
}

pub async fn serve(listener: TcpListener, manager: Arc<SessionManager>, default_scenario: Scenario) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    log::info!("listening on {addr:?}");
    axum::serve(listener, router(manager, default_scenario)).await
}

async fn create_session(
    State(app): State<AppState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let scenario = match req.scenario {
        Some(v) => parse_scenario(&v.to_string()).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?,
        None => (*app.default_scenario).clone(),
    };
    let config = SessionConfig {
        speed: req.speed,
        decimation: req.decimation,
        buffer: req.buffer.unwrap_or(DEFAULT_BUFFER),
    };
    let id = app.manager.start(&scenario, config)?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

async fn send_command(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<OperatorCommand>, JsonRejection>,
) -> Result<Response, ApiError> {
    let session = app.manager.get(&id)?;
    let Json(cmd) = body?;
    let ack = session.command(cmd).await?;
    Ok(Json(ack).into_response())
}

async fn session_state(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let session = app.manager.get(&id)?;
    let snap = session.snapshot();
    let (status, error) = match &snap.status {
        SessionStatus::Running => ("running", None),
        SessionStatus::Paused => ("paused", None),
        SessionStatus::Finished => ("finished", None),
        SessionStatus::Failed(e) => ("failed", Some(e.clone())),
    };
    let cfg = session.config();
    Ok(Json(json!({
        "id": id,
        "status": status,
        "error": error,
        "step": snap.frame.step,
        "speed": cfg.speed,
        "decimation": cfg.decimation,
        "cadence": snap.cadence,
        "frame": frame_to_json(&snap.frame),
    }))
    .into_response())
}

async fn telemetry(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let sub = app.manager.get(&id)?.subscribe();
    let stream = futures::stream::unfold(Some(sub), |sub| async move {
        let mut sub = sub?;
        let line = match sub.next().await? {
            StreamItem::Frame(f) => frame_to_json(&f),
            StreamItem::Overflow { missed } => json!({ "overflow": true, "missed": missed }),
        };
        Some((Ok::<_, Infallible>(format!("{line}\n")), Some(sub)))
    });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response())
}
