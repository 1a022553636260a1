//! Remote feature store interface and a deterministic simulated backend.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::key::splitmix64;
use super::{FeatureKey, FeatureValue, KeyKind};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("feature store unavailable: {0}")]
    Unavailable(String),
}

#[async_trait]
pub trait RemoteStore: Send + Sync + 'static {
    async fn fetch(&self, key: FeatureKey) -> Result<FeatureValue, StoreError>;

    /// One round trip for many keys. The default issues the fetches concurrently.
    async fn fetch_batch(&self, keys: &[FeatureKey]) -> Vec<Result<FeatureValue, StoreError>> {
        futures::future::join_all(keys.iter().map(|k| self.fetch(*k))).await
    }
}

/// Simulated store settings as they appear in the service config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub latency_ms_mean: f64,
    pub latency_ms_p99: f64,
    pub bytes_per_value: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { latency_ms_mean: 2.0, latency_ms_p99: 10.0, bytes_per_value: 512, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
enum Latency {
    Zero,
    Fixed(Duration),
    LogNormal(LogNormal<f64>),
}

impl Latency {
    /// Log-normal whose mean and 99th percentile match the config. Falls back
    /// to a constant when the pair has no log-normal fit.
    fn from_config(mean_ms: f64, p99_ms: f64) -> Self {
        const Z99: f64 = 2.326_347_874_040_841;
        if !(mean_ms > 0.0) {
            return Latency::Zero;
        }
        // ln(p99) − ln(mean) = z·σ − σ²/2, smaller root.
        let gap = (p99_ms / mean_ms).ln();
        let disc = Z99 * Z99 - 2.0 * gap;
        if !(p99_ms > mean_ms) || disc < 0.0 {
            return Latency::Fixed(Duration::from_secs_f64(mean_ms / 1e3));
        }
        let sigma = Z99 - disc.sqrt();
        let mu = mean_ms.ln() - sigma * sigma / 2.0;
        LogNormal::new(mu, sigma).map_or(Latency::Fixed(Duration::from_secs_f64(mean_ms / 1e3)), Latency::LogNormal)
    }

    fn sample(&self, rng: &mut impl Rng) -> Duration {
        match self {
            Latency::Zero => Duration::ZERO,
            Latency::Fixed(d) => *d,
            Latency::LogNormal(dist) => Duration::from_secs_f64(dist.sample(rng) / 1e3),
        }
    }
}

/// Deterministic in-memory store.
///
/// Every item id resolves to a pseudo-random embedding derived from the seed,
/// the id and the key's version, so any id is servable and runs reproduce.
/// [`mutate`](Self::mutate) bumps a key's version; [`set_missing`](Self::set_missing)
/// and [`set_failing`](Self::set_failing) inject empty results and errors.
pub struct SimulatedStore {
    config: StoreConfig,
    embedding_dim: usize,
    latency: Latency,
    versions: Mutex<HashMap<FeatureKey, u64>>,
    missing: Mutex<HashSet<FeatureKey>>,
    failing: Mutex<HashSet<FeatureKey>>,
    fetches: AtomicU64,
}

impl SimulatedStore {
    pub fn new(config: StoreConfig, embedding_dim: usize) -> Self {
        let latency = Latency::from_config(config.latency_ms_mean, config.latency_ms_p99);
        Self {
            config,
            embedding_dim,
            latency,
            versions: Mutex::default(),
            missing: Mutex::default(),
            failing: Mutex::default(),
            fetches: AtomicU64::new(0),
        }
    }

    pub fn with_fixed_latency(mut self, latency: Duration) -> Self {
        self.latency = if latency.is_zero() { Latency::Zero } else { Latency::Fixed(latency) };
        self
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn mutate(&self, key: FeatureKey) {
        *self.versions.lock().entry(key).or_insert(0) += 1;
    }

    pub fn set_missing(&self, key: FeatureKey, missing: bool) {
        let mut set = self.missing.lock();
        if missing {
            set.insert(key);
        } else {
            set.remove(&key);
        }
    }

    pub fn set_failing(&self, key: FeatureKey, failing: bool) {
        let mut set = self.failing.lock();
        if failing {
            set.insert(key);
        } else {
            set.remove(&key);
        }
    }

    pub fn version(&self, key: FeatureKey) -> u64 {
        self.versions.lock().get(&key).copied().unwrap_or(0)
    }

    /// Completed fetches, one per key.
    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::Relaxed)
    }

    fn key_seed(&self, key: FeatureKey, version: u64) -> u64 {
        splitmix64(self.config.seed ^ key.stable_hash() ^ version.wrapping_mul(0xa24b_aed4_963e_e407))
    }

    /// The embedding an item key currently resolves to.
    pub fn embedding(&self, key: FeatureKey) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.key_seed(key, self.version(key)));
        (0..self.embedding_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// The value a fetch of `key` returns right now, without latency.
    pub fn value_now(&self, key: FeatureKey) -> Result<FeatureValue, StoreError> {
        if self.failing.lock().contains(&key) {
            return Err(StoreError::Unavailable(format!("injected failure for {key:?}")));
        }
        if self.missing.lock().contains(&key) {
            return Ok(FeatureValue::empty());
        }
        Ok(match key.kind {
            KeyKind::Item => FeatureValue::from_embedding(&self.embedding(key), self.config.bytes_per_value),
            KeyKind::User => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.key_seed(key, self.version(key)));
                let mut side = vec![0u8; self.config.bytes_per_value.max(1)];
                rng.fill(side.as_mut_slice());
                FeatureValue::from_bytes(side)
            }
        })
    }

    fn latency_for(&self, salt: u64) -> Duration {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.config.seed ^ salt ^ 0x5bd1_e995));
        self.latency.sample(&mut rng)
    }
}

#[async_trait]
impl RemoteStore for SimulatedStore {
    async fn fetch(&self, key: FeatureKey) -> Result<FeatureValue, StoreError> {
        let wait = self.latency_for(self.key_seed(key, self.version(key)));
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
        self.fetches.fetch_add(1, Ordering::Relaxed);
        self.value_now(key)
    }

    async fn fetch_batch(&self, keys: &[FeatureKey]) -> Vec<Result<FeatureValue, StoreError>> {
        let salt = keys.iter().fold(keys.len() as u64, |acc, k| splitmix64(acc ^ k.stable_hash()));
        let wait = self.latency_for(salt);
        if !wait.is_zero() {
            tokio::time::sleep(wait).await;
        }
        self.fetches.fetch_add(keys.len() as u64, Ordering::Relaxed);
        keys.iter().map(|k| self.value_now(*k)).collect()
    }
}

/// Counts queries and bytes crossing the (simulated) network.
pub struct MeteredStore {
    inner: Arc<dyn RemoteStore>,
    queries: AtomicU64,
    bytes: AtomicU64,
}

impl MeteredStore {
    pub fn new(inner: Arc<dyn RemoteStore>) -> Self {
        Self { inner, queries: AtomicU64::new(0), bytes: AtomicU64::new(0) }
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn bytes(&self) -> u64 {
        self.bytes.load(Ordering::Relaxed)
    }

    fn record(&self, result: &Result<FeatureValue, StoreError>) {
        self.queries.fetch_add(1, Ordering::Relaxed);
        if let Ok(v) = result {
            self.bytes.fetch_add(v.len() as u64, Ordering::Relaxed);
        }
    }
}

#[async_trait]
impl RemoteStore for MeteredStore {
    async fn fetch(&self, key: FeatureKey) -> Result<FeatureValue, StoreError> {
        let result = self.inner.fetch(key).await;
        self.record(&result);
        result
    }

    async fn fetch_batch(&self, keys: &[FeatureKey]) -> Vec<Result<FeatureValue, StoreError>> {
        let results = self.inner.fetch_batch(keys).await;
        results.iter().for_each(|r| self.record(r));
        results
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> SimulatedStore {
        SimulatedStore::new(StoreConfig { seed: 9, ..Default::default() }, 4).with_fixed_latency(Duration::ZERO)
    }

    #[tokio::test]
    async fn values_are_deterministic_per_version() {
        let a = store();
        let b = store();
        let key = FeatureKey::item(77);
        let v1 = a.fetch(key).await.unwrap();
        assert_eq!(v1, b.fetch(key).await.unwrap());
        assert_eq!(v1.len(), 512);
        a.mutate(key);
        let v2 = a.fetch(key).await.unwrap();
        assert_ne!(v1, v2);
        let mut emb = [0.0; 4];
        assert!(v2.decode_embedding(&mut emb));
        assert_eq!(emb.to_vec(), a.embedding(key));
    }

    #[tokio::test]
    async fn missing_and_failing_keys() {
        let s = store();
        let key = FeatureKey::item(1);
        s.set_missing(key, true);
        assert!(s.fetch(key).await.unwrap().is_empty());
        s.set_failing(key, true);
        assert!(s.fetch(key).await.is_err());
        s.set_failing(key, false);
        s.set_missing(key, false);
        assert!(!s.fetch(key).await.unwrap().is_empty());
    }

    #[tokio::test]
    async fn metered_counts_queries_and_bytes() {
        let m = MeteredStore::new(Arc::new(store()));
        m.fetch(FeatureKey::item(1)).await.unwrap();
        m.fetch_batch(&[FeatureKey::item(2), FeatureKey::user(3)]).await;
        assert_eq!(m.queries(), 3);
        assert_eq!(m.bytes(), 3 * 512);
    }

    #[test]
    fn latency_fit_matches_moments() {
        let lat = Latency::from_config(2.0, 10.0);
        let Latency::LogNormal(dist) = lat else { panic!("expected log-normal") };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut samples: Vec<f64> = (0..200_000).map(|_| dist.sample(&mut rng)).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        samples.sort_by(f64::total_cmp);
        let p99 = samples[(0.99 * samples.len() as f64) as usize];
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
        assert!((p99 - 10.0).abs() < 0.5, "p99 {p99}");
        assert!(matches!(Latency::from_config(0.0, 1.0), Latency::Zero));
        assert!(matches!(Latency::from_config(5.0, 5.0), Latency::Fixed(_)));
    }
}
