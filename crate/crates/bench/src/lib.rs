//! Load generation and ablation runs against the scoring pipeline.

pub mod report;
pub mod runner;
pub mod workload;

pub use report::{emit_report, read_reports, RunReport, CSV_HEADER};
pub use runner::{run_scenario, AblationConfig, RunError, RunOutcome, Target};
pub use workload::{generate_workload, KeyDistribution, Scenario, Workload, WorkloadSpec};
