use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use flame_core::config::ServiceConfig;
use tracing_subscriber::EnvFilter;

/// Serves generative-recommendation scores over HTTP.
#[derive(Parser)]
#[command(name = "flame-serve", version)]
struct Args {
    /// JSON service config.
    #[arg(long, default_value = "config/sample.json")]
    config: PathBuf,
    /// Overrides `listen_addr` from the config.
    #[arg(long)]
    listen: Option<String>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let mut config = ServiceConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(listen) = args.listen {
        config.listen_addr = listen;
    }
    let service = flame_service::serve(config).await?;
    println!("listening on {}", service.url());
    service
        .run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    tracing::info!("drained, exiting");
    Ok(())
}
