//! Latency series, pair counters and throughput.

use std::time::{Duration, Instant};

use parking_lot::Mutex;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("percentile of an empty series")]
    EmptySeries,
    #[error("percentile rank {0} outside (0, 1]")]
    BadRank(String),
}

/// Nearest-rank percentile: the `ceil(p·N)`-th smallest sample (1-based).
pub fn percentile(series: &[f64], p: f64) -> Result<f64, MetricsError> {
    if series.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(MetricsError::BadRank(p.to_string()));
    }
    let mut sorted = series.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), p) - 1])
}

/// Smallest `k` in `1..=n` with `k/n ≥ p`. `ceil(p*n)` alone is off by one
/// when `p*n` rounds just past an integer (0.07·100 = 7.000000000000001).
fn nearest_rank(n: usize, p: f64) -> usize {
    let nf = n as f64;
    let mut k = ((p * nf).ceil() as usize).clamp(1, n);
    while k > 1 && (k - 1) as f64 / nf >= p {
        k -= 1;
    }
    while k < n && (k as f64 / nf) < p {
        k += 1;
    }
    k
}

/// Pairs per second over `window`; zero for an empty window.
pub fn throughput(pairs: u64, window: Duration) -> f64 {
    if window.is_zero() {
        0.0
    } else {
        pairs as f64 / window.as_secs_f64()
    }
}

pub fn mean(series: &[f64]) -> f64 {
    if series.is_empty() {
        0.0
    } else {
        series.iter().sum::<f64>() / series.len() as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegistrySnapshot {
    pub requests: u64,
    pub errors: u64,
    pub pairs_processed: u64,
    pub padded_pairs: u64,
    pub overall_ms: Vec<f64>,
    pub compute_ms: Vec<f64>,
    /// Earliest request start and latest completion, relative to registry creation.
    pub first_start: Option<Duration>,
    pub last_completion: Option<Duration>,
}

impl RegistrySnapshot {
    pub fn overall_p99(&self) -> f64 {
        percentile(&self.overall_ms, 0.99).unwrap_or(0.0)
    }

    pub fn compute_p99(&self) -> f64 {
        percentile(&self.compute_ms, 0.99).unwrap_or(0.0)
    }

    /// Span from the first request start to the last completion.
    pub fn active_window(&self) -> Duration {
        match (self.first_start, self.last_completion) {
            (Some(a), Some(b)) => b.saturating_sub(a),
            _ => Duration::ZERO,
        }
    }

    pub fn active_throughput(&self) -> f64 {
        throughput(self.pairs_processed, self.active_window())
    }
}

#[derive(Default)]
struct Series {
    requests: u64,
    errors: u64,
    pairs: u64,
    padded: u64,
    overall_ms: Vec<f64>,
    compute_ms: Vec<f64>,
    /// (completion offset, real pairs), in completion order.
    completions: Vec<(Duration, u64)>,
    first_start: Option<Duration>,
}

/// Append-only request accounting shared by all handlers.
pub struct MetricsRegistry {
    started: Instant,
    series: Mutex<Series>,
}

impl Default for MetricsRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl MetricsRegistry {
    pub fn new() -> Self {
        Self { started: Instant::now(), series: Mutex::default() }
    }

    /// One successful request, started at `started`, that scored `pairs`
    /// real candidates and computed `padded` dummy rows on top.
    pub fn record(&self, started: Instant, overall_ms: f64, compute_ms: f64, pairs: u64, padded: u64) {
        let at = self.started.elapsed();
        let began = started.saturating_duration_since(self.started);
        let mut s = self.series.lock();
        s.first_start = Some(s.first_start.map_or(began, |f| f.min(began)));
        s.requests += 1;
        s.pairs += pairs;
        s.padded += padded;
        s.overall_ms.push(overall_ms);
        s.compute_ms.push(compute_ms);
        s.completions.push((at, pairs));
    }

    pub fn record_error(&self) {
        let mut s = self.series.lock();
        s.requests += 1;
        s.errors += 1;
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        let s = self.series.lock();
        RegistrySnapshot {
            requests: s.requests,
            errors: s.errors,
            pairs_processed: s.pairs,
            padded_pairs: s.padded,
            overall_ms: s.overall_ms.clone(),
            compute_ms: s.compute_ms.clone(),
            first_start: s.first_start,
            last_completion: s.completions.last().map(|c| c.0),
        }
    }

    /// Real pairs completed during the trailing `window`, per second.
    pub fn throughput(&self, window: Duration) -> f64 {
        let now = self.started.elapsed();
        let from = now.saturating_sub(window);
        let s = self.series.lock();
        let start = s.completions.partition_point(|c| c.0 < from);
        throughput(s.completions[start..].iter().map(|c| c.1).sum(), window)
    }

    /// Real pairs per second since the registry was created.
    pub fn lifetime_throughput(&self) -> f64 {
        let pairs = self.series.lock().pairs;
        throughput(pairs, self.started.elapsed())
    }
}
