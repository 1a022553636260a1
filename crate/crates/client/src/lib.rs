//! Thin async client for the scoring service.

use flame_api::{ErrorBody, MetricsSnapshot, ScoreRequest, ScoreResponse};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("server answered {status}: {message}")]
    Status { status: StatusCode, message: String },
}

impl ClientError {
    /// HTTP status of a rejected request, if the server answered at all.
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Status { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlameClient {
    base: String,
    http: reqwest::Client,
}

impl FlameClient {
    /// `base` is the service root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_http(base, reqwest::Client::new())
    }

    pub fn with_http(base: impl Into<String>, http: reqwest::Client) -> Self {
        Self { base: base.into().trim_end_matches('/').to_string(), http }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub async fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, ClientError> {
        let resp = self.http.post(format!("{}/score", self.base)).json(req).send().await?;
        decode(resp).await
    }

    pub async fn metrics(&self) -> Result<MetricsSnapshot, ClientError> {
        decode(self.http.get(format!("{}/metrics", self.base)).send().await?).await
    }

    pub async fn health(&self) -> Result<(), ClientError> {
        let resp = self.http.get(format!("{}/healthz", self.base)).send().await?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(ClientError::Status { status: resp.status(), message: resp.text().await.unwrap_or_default() })
        }
    }
}

async fn decode<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp.json().await?);
    }
    let text = resp.text().await.unwrap_or_default();
    let message = error_message(&text).unwrap_or(text);
    Err(ClientError::Status { status, message })
}

fn error_message(text: &str) -> Option<String> {
    serde_json::from_str::<ErrorBody>(text).ok().map(|b| b.error)
}
