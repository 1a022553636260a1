//! Run reports and their CSV form.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use flame_api::MetricsSnapshot;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runner::AblationConfig;
use crate::workload::Scenario;

pub const CSV_HEADER: &str = "scenario,cache,mem_opt,routing,throughput_pairs_per_s,overall_ms_mean,overall_ms_p99,compute_ms_mean,compute_ms_p99,cache_hit_rate,network_bytes,steady_state_allocs";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("bad report row: {0}")]
    Row(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub scenario: Scenario,
    pub ablation: AblationConfig,
    pub throughput_pairs_per_s: f64,
    pub overall_latency_ms_mean: f64,
    pub overall_latency_ms_p99: f64,
    pub compute_latency_ms_mean: f64,
    pub compute_latency_ms_p99: f64,
    pub cache_hit_rate: f64,
    pub simulated_network_bytes: u64,
    pub allocations_steady_state: u64,
}

impl RunReport {
    pub fn from_metrics(scenario: Scenario, ablation: AblationConfig, m: &MetricsSnapshot) -> Self {
        let c = &m.cache;
        let lookups = c.hits_fresh + c.hits_stale + c.misses;
        let cache_hit_rate = if lookups == 0 { 0.0 } else { (c.hits_fresh + c.hits_stale) as f64 / lookups as f64 };
        Self {
            scenario,
            ablation,
            throughput_pairs_per_s: m.throughput_pairs_per_s,
            overall_latency_ms_mean: m.overall_ms_mean,
            overall_latency_ms_p99: m.overall_ms_p99,
            compute_latency_ms_mean: m.compute_ms_mean,
            compute_latency_ms_p99: m.compute_ms_p99,
            cache_hit_rate,
            simulated_network_bytes: m.network_bytes,
            allocations_steady_state: m.steady_state_allocs,
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "{} [{}]: {:.0} pairs/s, overall {:.2} ms mean / {:.2} ms p99, compute {:.2} ms mean / {:.2} ms p99, \
             hit rate {:.3}, network {} B, steady-state allocs {}",
            self.scenario,
            self.ablation,
            self.throughput_pairs_per_s,
            self.overall_latency_ms_mean,
            self.overall_latency_ms_p99,
            self.compute_latency_ms_mean,
            self.compute_latency_ms_p99,
            self.cache_hit_rate,
            self.simulated_network_bytes,
            self.allocations_steady_state,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Row {
    scenario: String,
    cache: String,
    mem_opt: String,
    routing: String,
    throughput_pairs_per_s: f64,
    overall_ms_mean: f64,
    overall_ms_p99: f64,
    compute_ms_mean: f64,
    compute_ms_p99: f64,
    cache_hit_rate: f64,
    network_bytes: u64,
    steady_state_allocs: u64,
}

fn on_off(flag: bool) -> String {
    if flag { "on" } else { "off" }.into()
}

fn parse_on_off(s: &str) -> Result<bool, ReportError> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(ReportError::Row(format!("expected on/off, got `{s}`"))),
    }
}

impl From<&RunReport> for Row {
    fn from(r: &RunReport) -> Self {
        Row {
            scenario: r.scenario.to_string(),
            cache: on_off(r.ablation.cache),
            mem_opt: on_off(r.ablation.mem_opt),
            routing: r.ablation.routing_name().into(),
            throughput_pairs_per_s: r.throughput_pairs_per_s,
            overall_ms_mean: r.overall_latency_ms_mean,
            overall_ms_p99: r.overall_latency_ms_p99,
            compute_ms_mean: r.compute_latency_ms_mean,
            compute_ms_p99: r.compute_latency_ms_p99,
            cache_hit_rate: r.cache_hit_rate,
            network_bytes: r.simulated_network_bytes,
            steady_state_allocs: r.allocations_steady_state,
        }
    }
}

impl TryFrom<Row> for RunReport {
    type Error = ReportError;

    fn try_from(row: Row) -> Result<Self, ReportError> {
        Ok(RunReport {
            scenario: row.scenario.parse().map_err(|e| ReportError::Row(format!("{e}")))?,
            ablation: AblationConfig {
                cache: parse_on_off(&row.cache)?,
                mem_opt: parse_on_off(&row.mem_opt)?,
                routing: AblationConfig::parse_routing(&row.routing).map_err(|e| ReportError::Row(e.to_string()))?,
            },
            throughput_pairs_per_s: row.throughput_pairs_per_s,
            overall_latency_ms_mean: row.overall_ms_mean,
            overall_latency_ms_p99: row.overall_ms_p99,
            compute_latency_ms_mean: row.compute_ms_mean,
            compute_latency_ms_p99: row.compute_ms_p99,
            cache_hit_rate: row.cache_hit_rate,
            simulated_network_bytes: row.network_bytes,
            allocations_steady_state: row.steady_state_allocs,
        })
    }
}

pub fn write_reports(reports: &[RunReport], out: impl Write) -> Result<(), ReportError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in reports {
        w.serialize(Row::from(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report` as a one-row CSV at `path` and prints its summary.
pub fn emit_report(report: &RunReport, path: impl AsRef<Path>) -> Result<(), ReportError> {
    write_reports(std::slice::from_ref(report), File::create(path)?)?;
    println!("{}", report.summary());
    Ok(())
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<RunReport>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<&str> = r.headers()?.iter().collect();
    if header.join(",") != CSV_HEADER {
        return Err(ReportError::Row(format!("unexpected header `{}`", header.join(","))));
    }
    r.deserialize::<Row>().map(|row| RunReport::try_from(row?)).collect()
}
