use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use flame_bench::{emit_report, run_scenario, AblationConfig, KeyDistribution, Scenario, Target, WorkloadSpec};
use flame_core::config::ServiceConfig;
use flame_core::orchestrator::Routing;

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Base,
    Long,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoutingArg {
    Explicit,
    Implicit,
}

/// Drives a scoring workload and writes a one-row CSV report.
#[derive(Parser)]
#[command(name = "flame-bench", version)]
struct Args {
    #[arg(long, value_enum, default_value = "base")]
    scenario: ScenarioArg,
    #[arg(long, value_enum, default_value = "on")]
    cache: Toggle,
    #[arg(long, value_enum, default_value = "on")]
    mem_opt: Toggle,
    #[arg(long, value_enum, default_value = "explicit")]
    routing: RoutingArg,
    #[arg(long, default_value_t = 10.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Zipf exponent for item keys; 0 draws keys uniformly.
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    /// Stop after this many requests.
    #[arg(long)]
    requests: Option<usize>,
    #[arg(long, default_value = "config/sample.json")]
    config: PathBuf,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Base URL of a running flame-serve; the ablation flags then only label the report.
    #[arg(long)]
    remote: Option<String>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let config = ServiceConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    let spec = WorkloadSpec {
        scenario: match args.scenario {
            ScenarioArg::Base => Scenario::Base,
            ScenarioArg::Long => Scenario::Long,
            ScenarioArg::Mixed => Scenario::Mixed,
        },
        duration_s: args.duration_s,
        concurrency: args.concurrency,
        key_distribution: if args.zipf == 0.0 { KeyDistribution::Uniform } else { KeyDistribution::Zipf(args.zipf) },
        seed: args.seed,
        max_requests: args.requests,
    };
    let ablation = AblationConfig {
        cache: matches!(args.cache, Toggle::On),
        mem_opt: matches!(args.mem_opt, Toggle::On),
        routing: match args.routing {
            RoutingArg::Explicit => Routing::Explicit,
            RoutingArg::Implicit => Routing::Implicit,
        },
    };
    let target = args.remote.map_or(Target::InProcess, Target::Remote);

    let outcome = run_scenario(&spec, ablation, &config, &target).await?;
    eprintln!(
        "{} requests ({} failed) in {:.2} s",
        outcome.driver.sent,
        outcome.driver.failed,
        outcome.wall.as_secs_f64()
    );
    emit_report(&outcome.report, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}
