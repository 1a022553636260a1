//! Bucketed LRU feature cache with TTL and two query modes.
//!
//! * **Async** ([`FeatureCache::get_async`]): never waits on the remote store.
//!   A fresh hit is returned as is; a stale hit is returned and refreshed in
//!   the background; a miss returns [`Lookup::Empty`] and triggers the same
//!   background fetch.
//! * **Sync** ([`FeatureCache::get_sync`]): a miss or stale hit blocks on the
//!   remote fetch, stores the result and returns it.
//!
//! Keys hash into `bucket_count` independent LRU lists, each behind its own
//! lock. At most one fetch per key is in flight at any time; concurrent
//! callers for the same key share it.

mod clock;
mod key;
mod store;

pub use clock::{Clock, ManualClock, MonotonicClock};
pub use key::{FeatureKey, FeatureValue, KeyKind};
pub use store::{MeteredStore, RemoteStore, SimulatedStore, StoreConfig, StoreError};

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Notify, OnceCell};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheMode {
    Async,
    Sync,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub bucket_count: usize,
    pub capacity_per_bucket: usize,
    pub ttl_ms: u64,
    pub mode: CacheMode,
    /// User-side features bypass the cache unless this is set.
    #[serde(default)]
    pub cache_user_keys: bool,
    /// `false` sends every lookup straight to the remote store.
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            bucket_count: 64,
            capacity_per_bucket: 1024,
            ttl_ms: 5000,
            mode: CacheMode::Async,
            cache_user_keys: false,
            enabled: true,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheError> {
        if self.bucket_count == 0 || !self.bucket_count.is_power_of_two() {
            return Err(CacheError::InvalidConfig(format!(
                "bucket_count {} must be a positive power of two",
                self.bucket_count
            )));
        }
        if self.capacity_per_bucket == 0 {
            return Err(CacheError::InvalidConfig("capacity_per_bucket must be positive".into()));
        }
        Ok(())
    }

    pub fn ttl(&self) -> Duration {
        Duration::from_millis(self.ttl_ms)
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),
    #[error("operation requires {0:?} mode")]
    WrongMode(CacheMode),
    #[error("async mode needs a tokio runtime")]
    NoRuntime,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub value: FeatureValue,
    pub written_at: Duration,
    pub ttl: Duration,
}

impl CacheEntry {
    pub fn is_fresh(&self, now: Duration) -> bool {
        now.saturating_sub(self.written_at) < self.ttl
    }
}

/// Result of a non-blocking lookup.
#[derive(Clone, Debug, PartialEq)]
pub enum Lookup {
    Fresh(FeatureValue),
    Stale(FeatureValue),
    Empty,
}

impl Lookup {
    pub fn value(&self) -> Option<&FeatureValue> {
        match self {
            Lookup::Fresh(v) | Lookup::Stale(v) => Some(v),
            Lookup::Empty => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct QueryStats {
    pub hits_fresh: u64,
    pub hits_stale: u64,
    pub misses: u64,
    pub remote_queries: u64,
    pub bytes_fetched: u64,
}

impl QueryStats {
    pub fn lookups(&self) -> u64 {
        self.hits_fresh + self.hits_stale + self.misses
    }
}

#[derive(Default)]
struct Counters {
    hits_fresh: AtomicU64,
    hits_stale: AtomicU64,
    misses: AtomicU64,
    remote_queries: AtomicU64,
    bytes_fetched: AtomicU64,
}

type FetchResult = Result<FeatureValue, StoreError>;
type Pending = Arc<OnceCell<FetchResult>>;

struct Bucket {
    lru: LruCache<FeatureKey, CacheEntry>,
    pending: HashMap<FeatureKey, Pending>,
}

struct Inner {
    config: CacheConfig,
    buckets: Vec<Mutex<Bucket>>,
    store: Arc<dyn RemoteStore>,
    clock: Arc<dyn Clock>,
    counters: Counters,
    runtime: Option<tokio::runtime::Handle>,
    refreshing: AtomicUsize,
    idle: Notify,
}

/// Shared handle; clones refer to the same cache.
#[derive(Clone)]
pub struct FeatureCache {
    inner: Arc<Inner>,
}

impl FeatureCache {
    /// Async mode must be constructed inside a tokio runtime; background
    /// refreshes are spawned onto it.
    pub fn new(config: CacheConfig, store: Arc<dyn RemoteStore>, clock: Arc<dyn Clock>) -> Result<Self, CacheError> {
        config.validate()?;
        let runtime = tokio::runtime::Handle::try_current().ok();
        if config.mode == CacheMode::Async && runtime.is_none() {
            return Err(CacheError::NoRuntime);
        }
        let cap = NonZeroUsize::new(config.capacity_per_bucket).expect("validated");
        let buckets = (0..config.bucket_count)
            .map(|_| Mutex::new(Bucket { lru: LruCache::new(cap), pending: HashMap::new() }))
            .collect();
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                buckets,
                store,
                clock,
                counters: Counters::default(),
                runtime,
                refreshing: AtomicUsize::new(0),
                idle: Notify::new(),
            }),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.inner.config
    }

    pub fn bucket_of(&self, key: &FeatureKey) -> usize {
        self.inner.bucket_of(key)
    }

    /// Writes `value` stamped with the current time, evicting the bucket's
    /// least recently used entry if it is full.
    pub fn put(&self, key: FeatureKey, value: FeatureValue) {
        let mut bucket = self.inner.bucket(&key).lock();
        self.inner.insert(&mut bucket, key, value);
    }

    /// Non-blocking lookup; schedules a background refresh on stale or miss.
    pub fn get_async(&self, key: FeatureKey) -> Result<Lookup, CacheError> {
        if self.inner.config.mode != CacheMode::Async {
            return Err(CacheError::WrongMode(CacheMode::Async));
        }
        let c = &self.inner.counters;
        let mut bucket = self.inner.bucket(&key).lock();
        let now = self.inner.clock.now();
        let outcome = match bucket.lru.get(&key) {
            Some(entry) if entry.is_fresh(now) => {
                c.hits_fresh.fetch_add(1, Ordering::Relaxed);
                return Ok(Lookup::Fresh(entry.value.clone()));
            }
            Some(entry) => {
                c.hits_stale.fetch_add(1, Ordering::Relaxed);
                Lookup::Stale(entry.value.clone())
            }
            None => {
                c.misses.fetch_add(1, Ordering::Relaxed);
                Lookup::Empty
            }
        };
        if let std::collections::hash_map::Entry::Vacant(e) = bucket.pending.entry(key) {
            let cell: Pending = Arc::new(OnceCell::new());
            e.insert(cell.clone());
            drop(bucket);
            self.spawn_refresh(key, cell);
        }
        Ok(outcome)
    }

    fn spawn_refresh(&self, key: FeatureKey, cell: Pending) {
        let inner = self.inner.clone();
        inner.refreshing.fetch_add(1, Ordering::SeqCst);
        let runtime = inner.runtime.clone().expect("async mode has a runtime");
        runtime.spawn(async move {
            let fetch_inner = inner.clone();
            cell.get_or_init(|| async move { fetch_inner.fetch_and_store(key).await }).await;
            if inner.refreshing.fetch_sub(1, Ordering::SeqCst) == 1 {
                inner.idle.notify_waiters();
            }
        });
    }

    /// Blocking lookup: a fresh hit returns immediately, anything else waits
    /// for (or joins) a remote fetch and stores its result.
    pub async fn get_sync(&self, key: FeatureKey) -> Result<FeatureValue, CacheError> {
        if self.inner.config.mode != CacheMode::Sync {
            return Err(CacheError::WrongMode(CacheMode::Sync));
        }
        let c = &self.inner.counters;
        let cell = {
            let mut bucket = self.inner.bucket(&key).lock();
            let now = self.inner.clock.now();
            match bucket.lru.get(&key) {
                Some(entry) if entry.is_fresh(now) => {
                    c.hits_fresh.fetch_add(1, Ordering::Relaxed);
                    return Ok(entry.value.clone());
                }
                Some(_) => c.hits_stale.fetch_add(1, Ordering::Relaxed),
                None => c.misses.fetch_add(1, Ordering::Relaxed),
            };
            bucket.pending.entry(key).or_insert_with(|| Arc::new(OnceCell::new())).clone()
        };
        let inner = self.inner.clone();
        let result = cell.get_or_init(|| async move { inner.fetch_and_store(key).await }).await;
        result.clone().map_err(CacheError::from)
    }

    pub fn stats(&self) -> QueryStats {
        let c = &self.inner.counters;
        QueryStats {
            hits_fresh: c.hits_fresh.load(Ordering::SeqCst),
            hits_stale: c.hits_stale.load(Ordering::SeqCst),
            misses: c.misses.load(Ordering::SeqCst),
            remote_queries: c.remote_queries.load(Ordering::SeqCst),
            bytes_fetched: c.bytes_fetched.load(Ordering::SeqCst),
        }
    }

    /// Resolves once no background refresh is running.
    pub async fn wait_idle(&self) {
        loop {
            let notified = self.inner.idle.notified();
            if self.inner.refreshing.load(Ordering::SeqCst) == 0 {
                return;
            }
            notified.await;
        }
    }

    pub fn refresh_in_flight(&self, key: &FeatureKey) -> bool {
        self.inner.bucket(key).lock().pending.contains_key(key)
    }

    /// Entry without touching recency.
    pub fn peek(&self, key: &FeatureKey) -> Option<CacheEntry> {
        self.inner.bucket(key).lock().lru.peek(key).cloned()
    }

    /// Keys of one bucket, most recently used first.
    pub fn bucket_keys(&self, bucket: usize) -> Vec<FeatureKey> {
        self.inner.buckets[bucket].lock().lru.iter().map(|(k, _)| *k).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.buckets.iter().map(|b| b.lock().lru.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Inner {
    fn bucket_of(&self, key: &FeatureKey) -> usize {
        (key.stable_hash() as usize) & (self.buckets.len() - 1)
    }

    fn bucket(&self, key: &FeatureKey) -> &Mutex<Bucket> {
        &self.buckets[self.bucket_of(key)]
    }

    fn insert(&self, bucket: &mut Bucket, key: FeatureKey, value: FeatureValue) {
        let entry = CacheEntry { value, written_at: self.clock.now(), ttl: self.config.ttl() };
        bucket.lru.put(key, entry);
    }

    /// The single fetch for `key`; stores a successful result and clears the
    /// pending marker either way.
    async fn fetch_and_store(&self, key: FeatureKey) -> FetchResult {
        self.counters.remote_queries.fetch_add(1, Ordering::SeqCst);
        let result = self.store.fetch(key).await;
        let mut bucket = self.bucket(&key).lock();
        if let Ok(value) = &result {
            self.counters.bytes_fetched.fetch_add(value.len() as u64, Ordering::SeqCst);
            self.insert(&mut bucket, key, value.clone());
        }
        bucket.pending.remove(&key);
        result
    }
}
