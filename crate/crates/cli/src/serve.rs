use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use clap::Args;
use pathcot_review_server::{serve, AppState, SessionStore};

use crate::io::{CmdResult, Failure};

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Review data directory (`sessions/`, `images/`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Name of the environment variable holding the shared access token.
    #[arg(long, default_value = "PATHCOT_REVIEW_TOKEN")]
    token_env: String,
}

pub fn run(args: ServeArgs) -> CmdResult {
    let token = std::env::var(&args.token_env)
        .ok()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Failure::schema(format!("environment variable {} is not set", args.token_env)))?;
    if !args.data.is_dir() {
        return Err(Failure::failed(format!("{}: not a directory", args.data.display())));
    }
    let state = AppState::new(SessionStore::new(&args.data), token);
    let runtime = tokio::runtime::Runtime::new().map_err(Failure::failed)?;
    runtime
        .block_on(serve(SocketAddr::new(args.host, args.port), state))
        .map_err(Failure::failed)
}
