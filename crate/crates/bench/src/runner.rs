//! Drives a workload against the pipeline (in-process) or a running service.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use flame_api::{MetricsSnapshot, ScoreRequest};
use flame_client::{ClientError, FlameClient};
use flame_core::config::ServiceConfig;
use flame_core::orchestrator::Routing;
use flame_core::pipeline::{Pipeline, PipelineError};
use parking_lot::Mutex;
use thiserror::Error;

use crate::report::RunReport;
use crate::workload::{Workload, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("service failed to start: {0}")]
    Boot(#[from] PipelineError),
    #[error("reading remote metrics: {0}")]
    Remote(#[from] ClientError),
    #[error("no request completed; nothing to report")]
    EmptyRun,
    #[error("driver task failed: {0}")]
    Driver(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationConfig {
    pub cache: bool,
    /// Pinned + packed transfers when on, pageable + one transfer per
    /// segment when off.
    pub mem_opt: bool,
    pub routing: Routing,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { cache: true, mem_opt: true, routing: Routing::Explicit }
    }
}

impl AblationConfig {
    pub fn apply(&self, config: &mut ServiceConfig) {
        config.cache.enabled = self.cache;
        config.mem_opt = self.mem_opt;
        config.orchestrator.routing = self.routing;
    }

    pub fn routing_name(&self) -> &'static str {
        match self.routing {
            Routing::Explicit => "explicit",
            Routing::Implicit => "implicit",
        }
    }

    pub fn parse_routing(s: &str) -> Result<Routing, WorkloadError> {
        match s {
            "explicit" => Ok(Routing::Explicit),
            "implicit" => Ok(Routing::Implicit),
            _ => Err(WorkloadError::Parse { kind: "routing", value: s.into() }),
        }
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on = |b: bool| if b { "on" } else { "off" };
        write!(f, "cache={} mem_opt={} routing={}", on(self.cache), on(self.mem_opt), self.routing_name())
    }
}

/// Where requests go.
#[derive(Clone, Debug, Default)]
pub enum Target {
    /// A fresh pipeline built from the service config, in this process.
    #[default]
    InProcess,
    /// An already running service; the ablation is then only a label.
    Remote(String),
}

/// One answered request.
#[derive(Clone, Debug, PartialEq)]
pub struct RequestRecord {
    pub index: u64,
    pub candidates: usize,
    pub overall_ms: f64,
    pub compute_ms: f64,
    /// Modeled host-to-device transfer; only known in-process.
    pub transfer_s: Option<f64>,
}

/// What the driver itself saw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DriverCounts {
    pub sent: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub pairs: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub metrics: MetricsSnapshot,
    pub driver: DriverCounts,
    /// Sorted by request index.
    pub records: Vec<RequestRecord>,
    pub wall: Duration,
}

enum Backend {
    Local(Arc<Pipeline>),
    Remote(FlameClient),
}

impl Backend {
    async fn call(&self, index: u64, req: &ScoreRequest) -> Option<RequestRecord> {
        let candidates = req.candidates.len();
        match self {
            Backend::Local(p) => p.handle_request(req).await.ok().map(|h| RequestRecord {
                index,
                candidates,
                overall_ms: h.response.overall_latency_ms,
                compute_ms: h.response.compute_latency_ms,
                transfer_s: Some(h.transfer.modeled_time_s),
            }),
            Backend::Remote(c) => c.score(req).await.ok().map(|r| RequestRecord {
                index,
                candidates,
                overall_ms: r.overall_latency_ms,
                compute_ms: r.compute_latency_ms,
                transfer_s: None,
            }),
        }
    }
}

/// Runs `spec` with `concurrency` request loops until `duration_s` elapses
/// (or `max_requests` have been sent), drains, and reports.
pub async fn run_scenario(
    spec: &WorkloadSpec,
    ablation: AblationConfig,
    config: &ServiceConfig,
    target: &Target,
) -> Result<RunOutcome, RunError> {
    let workload = Arc::new(Workload::new(spec.clone())?);
    let backend = Arc::new(match target {
        Target::InProcess => {
            let mut config = config.clone();
            ablation.apply(&mut config);
            Backend::Local(Arc::new(Pipeline::new(config)?))
        }
        Target::Remote(url) => Backend::Remote(FlameClient::new(url)),
    });

    let started = Instant::now();
    let deadline = started + Duration::from_secs_f64(spec.duration_s);
    let cap = spec.max_requests.map_or(u64::MAX, |m| m as u64);
    let next = Arc::new(AtomicU64::new(0));
    let records = Arc::new(Mutex::new(Vec::new()));
    let failed = Arc::new(AtomicU64::new(0));

    let loops: Vec<_> = (0..spec.concurrency)
        .map(|_| {
            let (workload, backend, next, records, failed) =
                (workload.clone(), backend.clone(), next.clone(), records.clone(), failed.clone());
            tokio::spawn(async move {
                while Instant::now() < deadline {
                    let index = next.fetch_add(1, Ordering::Relaxed);
                    if index >= cap {
                        break;
                    }
                    let req = workload.request(index);
                    match backend.call(index, &req).await {
                        Some(rec) => records.lock().push(rec),
                        None => {
                            failed.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
            })
        })
        .collect();
    for l in loops {
        l.await.map_err(|e| RunError::Driver(e.to_string()))?;
    }
    let wall = started.elapsed();

    let mut records = std::mem::take(&mut *records.lock());
    records.sort_by_key(|r| r.index);
    let failed = failed.load(Ordering::Relaxed);
    let driver = DriverCounts {
        sent: records.len() as u64 + failed,
        succeeded: records.len() as u64,
        failed,
        pairs: records.iter().map(|r| r.candidates as u64).sum(),
    };

    let metrics = match &*backend {
        Backend::Local(p) => {
            if let Some(cache) = p.cache() {
                cache.wait_idle().await;
            }
            let m = p.metrics_snapshot();
            p.shutdown();
            m
        }
        Backend::Remote(c) => c.metrics().await?,
    };
    if driver.succeeded == 0 {
        return Err(RunError::EmptyRun);
    }
    Ok(RunOutcome {
        report: RunReport::from_metrics(spec.scenario, ablation, &metrics),
        metrics,
        driver,
        records,
        wall,
    })
}
