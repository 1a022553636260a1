//! Request handling: feature query, packing, modeled transfer, orchestrated
//! compute and metrics.

use std::sync::Arc;
use std::time::Instant;

use flame_api::{CacheCounters, MetricsSnapshot, ScoreRequest, ScoreResponse};
use futures::future::join_all;
use thiserror::Error;

use crate::cache::{
    CacheError, CacheMode, Clock, FeatureCache, FeatureKey, FeatureValue, MeteredStore, MonotonicClock, RemoteStore,
    SimulatedStore,
};
use crate::config::{ConfigError, ServiceConfig};
use crate::metrics::{mean, MetricsRegistry};
use crate::model::{read_params, ModelParams};
use crate::orchestrator::{ExecutorPool, OrchestratorError};
use crate::staging::{pack_inputs, simulate_transfer, simulate_unpacked, TransferError, TransferMode, TransferReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("feature query failed: {0}")]
    Features(#[from] CacheError),
    #[error("packing inputs: {0}")]
    Packing(#[from] TransferError),
    #[error(transparent)]
    Compute(#[from] OrchestratorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl PipelineError {
    /// Whether the caller sent something invalid, as opposed to a server fault.
    pub fn is_client_error(&self) -> bool {
        matches!(self, PipelineError::BadRequest(_))
    }
}

/// A handled request plus the internals the benchmark reports on.
#[derive(Clone, Debug)]
pub struct Handled {
    pub response: ScoreResponse,
    pub transfer: TransferReport,
    /// History items actually fed to the model.
    pub history_used: usize,
    pub padded_rows: usize,
}

/// Embeddings a request resolved to, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedInputs {
    pub user: FeatureValue,
    pub history: Vec<f64>,
    pub candidates: Vec<f64>,
}

pub struct Pipeline {
    config: ServiceConfig,
    params: Arc<ModelParams>,
    store: Arc<SimulatedStore>,
    network: Arc<MeteredStore>,
    cache: Option<FeatureCache>,
    pool: ExecutorPool,
    metrics: MetricsRegistry,
}

impl Pipeline {
    /// Builds every component from `config`. Must run inside a tokio runtime
    /// when the cache is in async mode.
    pub fn new(config: ServiceConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let params = match &config.params_path {
            Some(path) => {
                let file = std::fs::File::open(path)
                    .map_err(|e| ConfigError::Invalid(format!("opening {}: {e}", path.display())))?;
                let params = read_params(std::io::BufReader::new(file))
                    .map_err(|e| ConfigError::Invalid(format!("loading {}: {e}", path.display())))?;
                let (mut got, mut want) = (*params.config(), config.model);
                got.seed = 0;
                want.seed = 0;
                if got != want {
                    return Err(ConfigError::Invalid("weights file does not match model config".into()).into());
                }
                params
            }
            None => ModelParams::init(config.model).map_err(|e| ConfigError::Invalid(e.to_string()))?,
        };
        let store = Arc::new(SimulatedStore::new(config.store.clone(), config.model.hidden_dim));
        Self::with_parts(config, Arc::new(params), store, Arc::new(MonotonicClock::new()))
    }

    /// Like [`new`](Self::new) with caller-supplied weights, store and clock.
    pub fn with_parts(
        config: ServiceConfig,
        params: Arc<ModelParams>,
        store: Arc<SimulatedStore>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if params.config() != &config.model {
            return Err(ConfigError::Invalid("weights do not match model config".into()).into());
        }
        let network = Arc::new(MeteredStore::new(store.clone()));
        let cache = if config.cache.enabled {
            Some(FeatureCache::new(config.cache.clone(), network.clone(), clock)?)
        } else {
            None
        };
        let profiles = config.profiles()?;
        let pool = ExecutorPool::build(profiles, params.clone(), config.attention, config.orchestrator.routing)?;
        Ok(Self { config, params, store, network, cache, pool, metrics: MetricsRegistry::new() })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn params(&self) -> &Arc<ModelParams> {
        &self.params
    }

    pub fn store(&self) -> &Arc<SimulatedStore> {
        &self.store
    }

    pub fn cache(&self) -> Option<&FeatureCache> {
        self.cache.as_ref()
    }

    pub fn pool(&self) -> &ExecutorPool {
        &self.pool
    }

    pub fn metrics(&self) -> &MetricsRegistry {
        &self.metrics
    }

    pub fn validate_request(&self, req: &ScoreRequest) -> Result<(), PipelineError> {
        let model = &self.config.model;
        if req.candidates.is_empty() {
            return Err(PipelineError::BadRequest("candidates must not be empty".into()));
        }
        if req.candidates.len() > model.max_candidates {
            return Err(PipelineError::BadRequest(format!(
                "{} candidates exceed the limit of {}",
                req.candidates.len(),
                model.max_candidates
            )));
        }
        if req.history.len() > model.max_history_len {
            return Err(PipelineError::BadRequest(format!(
                "history of {} exceeds the limit of {}",
                req.history.len(),
                model.max_history_len
            )));
        }
        Ok(())
    }

    /// The history items the model sees: the oldest `H mod num_blocks` are
    /// dropped so the rest splits evenly.
    pub fn usable_history<'a>(&self, history: &'a [u64]) -> &'a [u64] {
        &history[history.len() % self.config.model.num_blocks..]
    }

    /// Looks up user and item features. Items with no stored value resolve to
    /// zero embeddings.
    pub async fn resolve(&self, req: &ScoreRequest) -> Result<ResolvedInputs, PipelineError> {
        let d = self.config.model.hidden_dim;
        let history = self.usable_history(&req.history);
        let keys: Vec<FeatureKey> = history.iter().chain(&req.candidates).map(|&id| FeatureKey::item(id)).collect();

        let user_key = FeatureKey::user(req.user_id);
        let user = match &self.cache {
            Some(cache) if self.config.cache.cache_user_keys => self.lookup(cache, &[user_key]).await?.remove(0),
            _ => self.network.fetch(user_key).await.map_err(CacheError::from)?,
        };
        let values = match &self.cache {
            Some(cache) => self.lookup(cache, &keys).await?,
            None => {
                self.network.fetch_batch(&keys).await.into_iter().collect::<Result<_, _>>().map_err(CacheError::from)?
            }
        };

        let mut embeddings = vec![0.0; keys.len() * d];
        for (value, slot) in values.iter().zip(embeddings.chunks_exact_mut(d)) {
            value.decode_embedding(slot);
        }
        let candidates = embeddings.split_off(history.len() * d);
        Ok(ResolvedInputs { user, history: embeddings, candidates })
    }

    async fn lookup(&self, cache: &FeatureCache, keys: &[FeatureKey]) -> Result<Vec<FeatureValue>, PipelineError> {
        match cache.config().mode {
            CacheMode::Async => keys
                .iter()
                .map(|&k| Ok(cache.get_async(k)?.value().cloned().unwrap_or_else(FeatureValue::empty)))
                .collect(),
            CacheMode::Sync => join_all(keys.iter().map(|&k| cache.get_sync(k)))
                .await
                .into_iter()
                .map(|r| r.map_err(PipelineError::from))
                .collect(),
        }
    }

    pub async fn handle_request(&self, req: &ScoreRequest) -> Result<Handled, PipelineError> {
        let started = Instant::now();
        let result = self.handle_inner(req, started).await;
        match &result {
            Ok(h) => self.metrics.record(
                started,
                h.response.overall_latency_ms,
                h.response.compute_latency_ms,
                req.candidates.len() as u64,
                h.padded_rows as u64,
            ),
            Err(_) => self.metrics.record_error(),
        }
        result
    }

    async fn handle_inner(&self, req: &ScoreRequest, started: Instant) -> Result<Handled, PipelineError> {
        self.validate_request(req)?;
        let inputs = self.resolve(req).await?;

        let context = serde_json::to_vec(&req.context).expect("scalar map serializes");
        let batch = pack_inputs(&[
            ("user", inputs.user.as_bytes().to_vec()),
            ("history", f64_bytes(&inputs.history)),
            ("candidates", f64_bytes(&inputs.candidates)),
            ("context", context),
        ])?;
        let transfer = if self.config.mem_opt {
            simulate_transfer(&batch, TransferMode::Pinned, &self.config.bandwidth)
        } else {
            simulate_unpacked(&batch, TransferMode::Pageable, &self.config.bandwidth)
        };

        let history_used = inputs.history.len() / self.config.model.hidden_dim;
        let exec = self.pool.execute_request(inputs.history.into(), inputs.candidates.into()).await?;
        let scores = exec.scores.to_rows();

        let compute_ms = exec.compute.as_secs_f64() * 1e3;
        let overall_ms = started.elapsed().as_secs_f64() * 1e3 + transfer.modeled_time_s * 1e3;
        Ok(Handled {
            response: ScoreResponse { scores, overall_latency_ms: overall_ms, compute_latency_ms: compute_ms },
            transfer,
            history_used,
            padded_rows: exec.padded_rows,
        })
    }

    pub fn metrics_snapshot(&self) -> MetricsSnapshot {
        let s = self.metrics.snapshot();
        let cache = self.cache.as_ref().map(|c| c.stats()).unwrap_or_default();
        let allocs = self.pool.allocations();
        MetricsSnapshot {
            requests: s.requests,
            errors: s.errors,
            pairs_processed: s.pairs_processed,
            padded_pairs: s.padded_pairs,
            overall_ms_mean: mean(&s.overall_ms),
            overall_ms_p99: s.overall_p99(),
            compute_ms_mean: mean(&s.compute_ms),
            compute_ms_p99: s.compute_p99(),
            throughput_pairs_per_s: s.active_throughput(),
            cache: CacheCounters {
                hits_fresh: cache.hits_fresh,
                hits_stale: cache.hits_stale,
                misses: cache.misses,
                remote_queries: cache.remote_queries,
                bytes_fetched: cache.bytes_fetched,
            },
            network_bytes: self.network.bytes(),
            remote_queries: self.network.queries(),
            model_buffer_allocations: allocs.total(),
            steady_state_allocs: allocs.steady_state(),
        }
    }

    /// Stops accepting compute work; requests already holding executors finish.
    pub fn shutdown(&self) {
        self.pool.shutdown();
    }
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}
