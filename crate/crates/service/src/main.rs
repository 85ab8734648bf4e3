use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Parser;

use dualtrack_service::{router, AppState, ServiceConfig};

/// Serves live dialog sessions over HTTP and WebSocket.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// Address to listen on.
    #[arg(long, env = "DUALTRACK_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory with extra `<name>.kb` profiles.
    #[arg(long, env = "DUALTRACK_PROFILE_DIR")]
    profile_dir: Option<PathBuf>,
    /// Directory for per-session event logs.
    #[arg(long, env = "DUALTRACK_LOG_DIR")]
    log_dir: Option<PathBuf>,
    /// Directory for solved policies.
    #[arg(long, env = "DUALTRACK_POLICY_CACHE")]
    policy_cache: Option<PathBuf>,
    /// Pass parsed answers through the model's observation noise.
    #[arg(long)]
    simulate_noise: bool,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let state = AppState::new(ServiceConfig {
        profile_dir: args.profile_dir,
        log_dir: args.log_dir,
        simulate_noise: args.simulate_noise,
        policy_cache: args.policy_cache,
    });
    let listener = tokio::net::TcpListener::bind(args.bind).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
