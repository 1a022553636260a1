//! JSON wire types for the scoring service.
//!
//! `POST /score` takes a [`ScoreRequest`] and answers with a [`ScoreResponse`]
//! (or an [`ErrorBody`] with a 4xx/5xx status). `GET /metrics` answers with a
//! [`MetricsSnapshot`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// A scalar value in the request context map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ContextValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

/// One user with a behavior history and the candidate items to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub user_id: u64,
    #[serde(default)]
    pub history: Vec<u64>,
    pub candidates: Vec<u64>,
    #[serde(default)]
    pub context: BTreeMap<String, ContextValue>,
}

/// Per-candidate, per-task probabilities in candidate order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<Vec<f64>>,
    pub overall_latency_ms: f64,
    pub compute_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Counters exposed by `GET /metrics`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub requests: u64,
    pub errors: u64,
    /// Real (non-padded) user-item pairs scored.
    pub pairs_processed: u64,
    pub padded_pairs: u64,
    pub overall_ms_mean: f64,
    pub overall_ms_p99: f64,
    pub compute_ms_mean: f64,
    pub compute_ms_p99: f64,
    pub throughput_pairs_per_s: f64,
    pub cache: CacheCounters,
    pub network_bytes: u64,
    pub remote_queries: u64,
    pub model_buffer_allocations: u64,
    pub steady_state_allocs: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits_fresh: u64,
    pub hits_stale: u64,
    pub misses: u64,
    pub remote_queries: u64,
    pub bytes_fetched: u64,
}
