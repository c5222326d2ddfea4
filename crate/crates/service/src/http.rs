//! Routes: `POST /sessions`, `POST /sessions/{id}/message`,
//! `POST /sessions/{id}/action`, `GET /sessions/{id}/trace`, `GET /healthz`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;

use crate::engine::{ActionRequest, BuyerMessage, CreateSession, Engine, ServiceError, API_VERSION};

#[derive(Serialize)]
struct ErrorBody {
    v: u32,
    error: String,
}

fn error(status: StatusCode, message: String) -> Response {
    (status, Json(ErrorBody { v: API_VERSION, error: message })).into_response()
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{self}");
        }
        error(status, self.to_string())
    }
}

/// Runs an engine call off the async workers; session locks and model
/// evaluation block.
async fn blocking<T, F>(engine: Arc<Engine>, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Engine) -> Result<T, ServiceError> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&engine)).await {
        Ok(Ok(body)) => Json(body).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")),
    }
}

/// Unwraps a JSON body and checks its `v`; the error is the message for a 400.
fn body<T>(payload: Result<Json<T>, JsonRejection>, version: impl Fn(&T) -> u32) -> Result<T, String> {
    let Json(t) = payload.map_err(|e| e.body_text())?;
    match version(&t) {
        API_VERSION => Ok(t),
        v => Err(format!("unsupported payload version {v}, expected {API_VERSION}")),
    }
}

async fn healthz(State(engine): State<Arc<Engine>>) -> Response {
    Json(engine.health()).into_response()
}

async fn create(State(engine): State<Arc<Engine>>, payload: Result<Json<CreateSession>, JsonRejection>) -> Response {
    let req = match body(payload, |r| r.v) {
        Ok(r) => r,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    blocking(engine, move |e| e.create_session(&req)).await
}

async fn message(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    payload: Result<Json<BuyerMessage>, JsonRejection>,
) -> Response {
    let req = match body(payload, |r| r.v) {
        Ok(r) => r,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    blocking(engine, move |e| e.message(&id, &req)).await
}

async fn action(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    payload: Result<Json<ActionRequest>, JsonRejection>,
) -> Response {
    let req = match body(payload, |r| r.v) {
        Ok(r) => r,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    blocking(engine, move |e| e.action(&id, &req)).await
}

async fn trace(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Response {
    blocking(engine, move |e| e.trace(&id)).await
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create))
        .route("/sessions/{id}/message", post(message))
        .route("/sessions/{id}/action", post(action))
        .route("/sessions/{id}/trace", get(trace))
        .with_state(engine)
}

/// Serves until the process is stopped.
pub async fn serve(engine: Arc<Engine>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine)).await
}
