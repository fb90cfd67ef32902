//! HTTP face of the gateway and its client.
//!
//! `POST /text_search` and `POST /image_search` take the search payload
//! `{"queries":[{"entity":str,"q":str}]}` and answer
//! `200 {"results":[{"entity","q","results":[SearchResult],"cache_hit"}]}`.
//! Errors are `{"error":{"code":str,"message":str}}` with status 400
//! (`malformed_request`, `invalid_request`) or 502 (`backend_unavailable`).
//! `GET /health` answers `ok`.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::{render_observation, Gateway, GatewayError, QueryResults, ToolError, Tools};
use crate::protocol::{Modality, Observation, SearchQuery, SearchQuerySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequestBody {
    pub queries: Vec<SearchQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponseBody {
    pub results: Vec<QueryResults>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

fn error(status: StatusCode, code: &str, message: impl Into<String>) -> Response {
    let body = ErrorBody {
        error: ErrorDetail {
            code: code.into(),
            message: message.into(),
        },
    };
    (status, Json(body)).into_response()
}

async fn handle(gw: Arc<Gateway>, modality: Modality, body: Bytes) -> Response {
    let req: SearchRequestBody = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_request", e.to_string()),
    };
    if req.queries.is_empty() {
        return error(StatusCode::BAD_REQUEST, "invalid_request", "queries must be non-empty");
    }
    if let Some(i) = req.queries.iter().position(|q| q.q.trim().is_empty()) {
        return error(StatusCode::BAD_REQUEST, "invalid_request", format!("query {i} is empty"));
    }
    let joined = tokio::task::spawn_blocking(move || gw.search_batch(modality, &req.queries)).await;
    match joined {
        Ok(Ok(results)) => Json(SearchResponseBody { results }).into_response(),
        Ok(Err(GatewayError::EmptyQuery)) => error(StatusCode::BAD_REQUEST, "invalid_request", "empty query"),
        Ok(Err(e)) => error(StatusCode::BAD_GATEWAY, "backend_unavailable", e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route(
            "/text_search",
            post(|State(gw): State<Arc<Gateway>>, body: Bytes| handle(gw, Modality::Text, body)),
        )
        .route(
            "/image_search",
            post(|State(gw): State<Arc<Gateway>>, body: Bytes| handle(gw, Modality::Image, body)),
        )
        .route("/health", get(|| async { "ok" }))
        .with_state(gw)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    gw: Arc<Gateway>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(gw)).with_graceful_shutdown(shutdown).await
}

fn bind_std(addr: &str) -> Result<std::net::TcpListener, GatewayError> {
    let bind_err = |e: std::io::Error| GatewayError::Bind {
        addr: addr.to_string(),
        detail: e.to_string(),
    };
    let l = std::net::TcpListener::bind(addr).map_err(bind_err)?;
    l.set_nonblocking(true).map_err(bind_err)?;
    Ok(l)
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}

/// A gateway service running on a background thread; stops on drop.
pub struct RunningService {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl RunningService {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("service thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves in the background.
pub fn spawn(addr: &str, gw: Arc<Gateway>) -> Result<RunningService, GatewayError> {
    let listener = bind_std(addr)?;
    let local = listener.local_addr().map_err(|e| GatewayError::Bind {
        addr: addr.to_string(),
        detail: e.to_string(),
    })?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime()?.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            serve(listener, gw, async move {
                let _ = rx.await;
            })
            .await
        })
    });
    Ok(RunningService {
        addr: local,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves in the foreground until Ctrl-C.
pub fn run_foreground(addr: &str, gw: Arc<Gateway>) -> Result<(), GatewayError> {
    let listener = bind_std(addr)?;
    let io = |e: std::io::Error| GatewayError::Bind {
        addr: addr.to_string(),
        detail: e.to_string(),
    };
    tracing::info!(addr = %listener.local_addr().map_err(io)?, "search gateway listening");
    runtime().map_err(io)?.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener).map_err(io)?;
        serve(listener, gw, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(io)
    })
}

/// Client for a running gateway service.
#[derive(Debug, Clone)]
pub struct RemoteTools {
    base_url: String,
    agent: ureq::Agent,
}

impl RemoteTools {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        RemoteTools {
            base_url: base_url.into(),
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(false)
                .build()
                .into(),
        }
    }

    pub fn search_batch(&self, modality: Modality, queries: &[SearchQuery]) -> Result<Vec<QueryResults>, ToolError> {
        let path = match modality {
            Modality::Text => "text_search",
            Modality::Image => "image_search",
        };
        let url = format!("{}/{path}", self.base_url);
        let unavailable = |e: ureq::Error| ToolError::Unavailable(format!("{url}: {e}"));
        let mut resp = self
            .agent
            .post(&url)
            .send_json(&SearchRequestBody {
                queries: queries.to_vec(),
            })
            .map_err(unavailable)?;
        let status = resp.status();
        if status.is_success() {
            let body: SearchResponseBody = resp.body_mut().read_json().map_err(unavailable)?;
            return Ok(body.results);
        }
        let detail = resp
            .body_mut()
            .read_json::<ErrorBody>()
            .map(|b| format!("{}: {}", b.error.code, b.error.message))
            .unwrap_or_else(|_| format!("HTTP {status}"));
        if status.is_client_error() {
            Err(ToolError::Rejected(detail))
        } else {
            Err(ToolError::Unavailable(detail))
        }
    }
}

impl Tools for RemoteTools {
    fn execute(&self, set: &SearchQuerySet) -> Result<Observation, ToolError> {
        let batch = self.search_batch(set.modality, &set.entries)?;
        Ok(render_observation(set.modality, &batch))
    }
}
