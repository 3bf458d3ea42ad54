use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};
use mtcd::executor::{run_agent, AgentConfig, RunnerKind};

#[derive(Parser)]
#[command(name = "executor", about = "Per-node task execution agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register with a dispatcher and run tasks until shut down.
    Run {
        #[arg(long)]
        dispatcher: String,
        #[arg(long, default_value_t = 1)]
        slots: u32,
        #[arg(long)]
        cache_dir: PathBuf,
        #[arg(long, default_value_t = 1 << 30)]
        cache_capacity_bytes: u64,
        /// Stable agent identity; defaults to a host-unique value.
        #[arg(long)]
        address: Option<String>,
        /// Complete tasks synthetically after this many ms instead of
        /// forking processes (benchmark mode).
        #[arg(long)]
        synthetic_delay_ms: Option<u64>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            dispatcher,
            slots,
            cache_dir,
            cache_capacity_bytes,
            address,
            synthetic_delay_ms,
        } => {
            let mut cfg = AgentConfig::new(dispatcher, slots, cache_dir);
            cfg.cache_capacity_bytes = cache_capacity_bytes;
            if let Some(addr) = address {
                cfg.address = addr;
            }
            if let Some(delay) = synthetic_delay_ms {
                cfg.runner = RunnerKind::Synthetic {
                    delay: Duration::from_millis(delay),
                };
            }
            run_agent(cfg)?;
            Ok(())
        }
    }
}
