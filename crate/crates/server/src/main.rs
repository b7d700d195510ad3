//! Standalone entry point for the experiment-lab service.

use clap::Parser;

/// HTTP service exposing the QKD experiment lab over JSON.
#[derive(Parser)]
#[command(name = "qkd-lab-server", version, about)]
struct Args {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:7787")]
    bind: String,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(&args.bind).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    qkd_lab_server::serve(listener).await?;
    Ok(())
}
