//! HTTP front end for [`Pipeline`].
//!
//! | route          | body                 | answer                         |
//! |----------------|----------------------|--------------------------------|
//! | `POST /score`  | `ScoreRequest` JSON  | `ScoreResponse` or `ErrorBody` |
//! | `GET /metrics` |                      | `MetricsSnapshot`              |
//! | `GET /healthz` |                      | `ok`                           |

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use flame_api::{ErrorBody, MetricsSnapshot, ScoreRequest};
use flame_core::config::ServiceConfig;
use flame_core::pipeline::{Pipeline, PipelineError};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{oneshot, Semaphore};
use tokio::task::JoinHandle;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("building pipeline: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("binding {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("server failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("server task panicked")]
    Panicked,
}

#[derive(Clone)]
struct AppState {
    pipeline: Arc<Pipeline>,
    permits: Arc<Semaphore>,
    accepted: Arc<AtomicU64>,
}

/// Routes over an existing pipeline, at most `max_concurrency` requests
/// scoring at once; the rest wait their turn.
pub fn router(pipeline: Arc<Pipeline>, max_concurrency: usize) -> Router {
    router_with_counter(pipeline, max_concurrency, Arc::default())
}

fn router_with_counter(pipeline: Arc<Pipeline>, max_concurrency: usize, accepted: Arc<AtomicU64>) -> Router {
    let state = AppState { pipeline, permits: Arc::new(Semaphore::new(max_concurrency)), accepted };
    Router::new()
        .route("/score", post(score))
        .route("/metrics", get(metrics))
        .route("/healthz", get(|| async { "ok" }))
        .with_state(state)
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(ErrorBody { error: message.to_string() })).into_response()
}

async fn score(State(state): State<AppState>, body: Result<Json<ScoreRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(req) => req,
        Err(rejection) => return error(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    state.accepted.fetch_add(1, Ordering::SeqCst);
    let _permit = match state.permits.acquire().await {
        Ok(p) => p,
        Err(_) => return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down"),
    };
    match state.pipeline.handle_request(&req).await {
        Ok(handled) => Json(handled.response).into_response(),
        Err(e) if e.is_client_error() => error(StatusCode::BAD_REQUEST, e),
        Err(e) => {
            tracing::warn!(error = %e, "request failed");
            error(StatusCode::INTERNAL_SERVER_ERROR, e)
        }
    }
}

async fn metrics(State(state): State<AppState>) -> Json<MetricsSnapshot> {
    Json(state.pipeline.metrics_snapshot())
}

/// A service listening in the background.
pub struct RunningService {
    addr: SocketAddr,
    pipeline: Arc<Pipeline>,
    accepted: Arc<AtomicU64>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl RunningService {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.pipeline
    }

    /// Well-formed score requests received so far.
    pub fn accepted(&self) -> u64 {
        self.accepted.load(Ordering::SeqCst)
    }

    /// Stops accepting connections and waits for in-flight requests to be
    /// answered.
    pub async fn shutdown(mut self) -> Result<(), ServeError> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let result = (&mut self.task).await;
        self.pipeline.shutdown();
        result.map_err(|_| ServeError::Panicked)?.map_err(ServeError::from)
    }

    /// Runs until `signal` resolves, then drains.
    pub async fn run_until(self, signal: impl std::future::Future<Output = ()>) -> Result<(), ServeError> {
        signal.await;
        self.shutdown().await
    }
}

/// Builds the pipeline from `config`, binds `config.listen_addr` and starts
/// serving. Returns once the listener is bound.
pub async fn serve(config: ServiceConfig) -> Result<RunningService, ServeError> {
    let listen = config.listen_addr.clone();
    let max_concurrency = config.max_concurrency;
    let pipeline = Arc::new(Pipeline::new(config)?);
    let listener =
        TcpListener::bind(&listen).await.map_err(|source| ServeError::Bind { addr: listen.clone(), source })?;
    let addr = listener.local_addr()?;
    let accepted = Arc::new(AtomicU64::new(0));
    let app = router_with_counter(pipeline.clone(), max_concurrency, accepted.clone());
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    tracing::info!(%addr, "listening");
    Ok(RunningService { addr, pipeline, accepted, stop: Some(stop), task })
}
