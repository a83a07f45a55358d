//! `topgap`: command-line front end over the core crate. Four commands —
//! `gen-data`, `train`, `eval`, `sweep` — each of which writes its outputs
//! plus a run manifest with content hashes, so experiments can be replayed
//! and diffed by hash alone.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data/format errors,
//! 4 numeric failures (e.g. divergence). Anticipated failures never panic.

mod commands;
mod manifest;
mod opts;

use clap::Parser;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use topgap_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "topgap",
    version,
    about = "Train, attack, and analyze CNNs with top-k pooled class maps"
)]
struct Cli {
    /// Worker thread count; the TOPGAP_THREADS variable is the fallback.
    /// 1 selects the bit-deterministic verification mode.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON file with defaults for the subcommand; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: commands::Cmd,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = init_threads(cli.threads)?;
    let file = cli.config.as_deref().map(load_config).transpose()?;
    commands::dispatch(cli.cmd, file, threads)
}

/// Builds the global rayon pool. Flag beats TOPGAP_THREADS beats the rayon
/// default; returns the count actually in effect for the manifest.
fn init_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("TOPGAP_THREADS") {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("TOPGAP_THREADS must be a positive integer, got '{s}'")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(format!("thread pool already initialized: {e}")))?;
    }
    Ok(rayon::current_num_threads())
}

fn load_config(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config file {} is not valid JSON: {e}", path.display())))
}
