use anyhow::Context;
use inpaint_service::{router, AppState, ServiceConfig};
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cfg = ServiceConfig::from_env()?;
    let state = AppState::from_config(&cfg).context("service refused to start")?;
    tracing::info!(
        prompts = state.prompts().len(),
        tau = state.tau(),
        workers = cfg.workers,
        "loaded"
    );
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", cfg.port))
        .await
        .with_context(|| format!("cannot bind port {}", cfg.port))?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
