use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mtcd::dispatcher::{serve, DispatcherConfig, ServerConfig};

#[derive(Parser)]
#[command(name = "dispatcher", about = "Task dispatch service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Listen for executors and clients and schedule tasks.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7547")]
        bind: String,
        #[arg(long, default_value_t = 5000)]
        heartbeat_ms: u64,
        /// Failures inside the window that suspend an executor.
        #[arg(long, default_value_t = 3)]
        suspend_failures: usize,
        #[arg(long, default_value_t = 60000)]
        suspend_window_ms: u64,
        /// Retry budget cap per task.
        #[arg(long, default_value_t = 3)]
        retries: u32,
        /// Directory for the structured task event log.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Serve {
            bind,
            heartbeat_ms,
            suspend_failures,
            suspend_window_ms,
            retries,
            log_dir,
        } => {
            let handle = serve(ServerConfig {
                bind,
                dispatcher: DispatcherConfig {
                    heartbeat_interval_ms: heartbeat_ms,
                    suspend_failure_threshold: suspend_failures,
                    suspend_window_ms,
                    max_retries: retries,
                    ..DispatcherConfig::default()
                },
                log_dir,
                tick_ms: 100,
            })?;
            println!("dispatcher listening on {}", handle.local_addr());
            // Serve until killed.
            loop {
                std::thread::sleep(std::time::Duration::from_secs(60));
                let stats = handle.stats();
                log::info!(
                    "submitted={} queued={} running={} ok={} failed_app={} failed_system={} executors={}",
                    stats.submitted,
                    stats.queued,
                    stats.dispatched_running,
                    stats.completed_ok,
                    stats.failed_app,
                    stats.failed_system,
                    stats.registered_executors
                );
            }
        }
    }
}
