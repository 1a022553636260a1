use std::time::{Duration, Instant};

use flame_bench::{run_scenario, AblationConfig, KeyDistribution, RunError, Scenario, Target, Workload, WorkloadSpec};
use flame_core::cache::CacheMode;
use flame_core::config::ServiceConfig;
use flame_core::model::{model_forward_with, AttentionKernel, ModelConfig, ModelParams, TokenSequence};
use flame_core::orchestrator::{OrchestratorConfig, Routing};
use flame_core::pipeline::Pipeline;

fn small_config() -> ServiceConfig {
    let mut c = ServiceConfig::new(ModelConfig {
        hidden_dim: 4,
        head_dim: 4,
        num_blocks: 8,
        layers_per_block: 0,
        ffn_dim: 4,
        num_tasks: 2,
        max_history_len: 1024,
        max_candidates: 1024,
        seed: 1,
    });
    c.store.latency_ms_mean = 0.0;
    c.orchestrator = OrchestratorConfig { profile_shapes: vec![128, 256, 512, 1024], ..Default::default() };
    c
}

fn spec(requests: usize) -> WorkloadSpec {
    WorkloadSpec {
        scenario: Scenario::Mixed,
        duration_s: 600.0,
        concurrency: 3,
        key_distribution: KeyDistribution::Zipf(1.0),
        seed: 77,
        max_requests: Some(requests),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn zero_duration_is_an_empty_run() {
    let spec = WorkloadSpec { duration_s: 0.0, ..spec(10) };
    let err = run_scenario(&spec, AblationConfig::default(), &small_config(), &Target::InProcess).await.unwrap_err();
    assert!(matches!(err, RunError::EmptyRun));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn report_arithmetic() {
    let out = run_scenario(&spec(120), AblationConfig::default(), &small_config(), &Target::InProcess).await.unwrap();
    let r = &out.report;
    assert_eq!(out.driver.succeeded, 120);
    assert_eq!(out.metrics.requests, 120);
    assert_eq!(out.metrics.pairs_processed, out.driver.pairs);
    assert!(r.throughput_pairs_per_s > 0.0);
    for v in [
        r.overall_latency_ms_mean,
        r.overall_latency_ms_p99,
        r.compute_latency_ms_mean,
        r.compute_latency_ms_p99,
        r.cache_hit_rate,
    ] {
        assert!(v.is_finite() && v >= 0.0);
    }
    // The active window lies inside the driver's wall time.
    let window = out.driver.pairs as f64 / r.throughput_pairs_per_s;
    assert!(window <= out.wall.as_secs_f64() * 1.01, "{window} vs {:?}", out.wall);
    assert!(window >= out.wall.as_secs_f64() * 0.5, "{window} vs {:?}", out.wall);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fixed_seeds_give_identical_scores() {
    let mut config = small_config();
    config.cache.mode = CacheMode::Sync;
    config.model.layers_per_block = 1;
    let workload = Workload::new(spec(6)).unwrap();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let pipeline = Pipeline::new(config.clone()).unwrap();
        let mut scores = Vec::new();
        for req in workload.iter().take(6) {
            scores.push(pipeline.handle_request(&req).await.unwrap().response.scores);
        }
        runs.push(scores);
    }
    assert_eq!(runs[0], runs[1]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn single_flag_ablations_point_the_right_way() {
    let config = small_config();
    let base = AblationConfig::default();
    let run = |ablation| {
        let config = config.clone();
        async move { run_scenario(&spec(300), ablation, &config, &Target::InProcess).await.unwrap() }
    };
    let on = run(base).await;
    let off = run(AblationConfig { cache: false, ..base }).await;
    assert!(on.report.simulated_network_bytes < off.report.simulated_network_bytes);
    assert_eq!(off.report.cache_hit_rate, 0.0);
    let implicit = run(AblationConfig { routing: Routing::Implicit, ..base }).await;
    assert_eq!(on.report.allocations_steady_state, 0);
    assert_eq!(implicit.report.allocations_steady_state, 300);
}

#[test]
fn tiled_attention_is_not_slower_on_long_sizes() {
    let cfg = ModelConfig {
        hidden_dim: 8,
        head_dim: 4,
        num_blocks: 8,
        layers_per_block: 1,
        ffn_dim: 16,
        num_tasks: 2,
        max_history_len: 1024,
        max_candidates: 512,
        seed: 3,
    };
    let params = ModelParams::init(cfg).unwrap();
    let history = TokenSequence::new(8, (0..1024 * 8).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let cands = TokenSequence::new(8, (0..512 * 8).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let best = |kernel| {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                model_forward_with(&history, &cands, &params, kernel).unwrap();
                t.elapsed()
            })
            .min()
            .unwrap()
    };
    let naive = best(AttentionKernel::Naive);
    let tiled = best(AttentionKernel::Tiled { tile: 64 });
    // 10% slack for timer noise on a shared machine.
    assert!(tiled <= naive + naive / 10 + Duration::from_millis(1), "tiled {tiled:?} vs naive {naive:?}");
}
