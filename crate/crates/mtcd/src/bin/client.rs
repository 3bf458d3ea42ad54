use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};
use mtcd::client::{load_workload, submit_all, ClientOptions};

#[derive(Parser)]
#[command(name = "client", about = "Workload submission client")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stream a workload file across one or more dispatchers.
    Submit {
        #[arg(long)]
        workload: PathBuf,
        /// Comma-separated HOST:PORT list.
        #[arg(long, value_delimiter = ',')]
        dispatchers: Vec<String>,
        #[arg(long, default_value_t = 3)]
        credit_multiplier: u64,
        #[arg(long, default_value_t = 3600)]
        timeout_s: u64,
        /// Per-task event log (CSV).
        #[arg(long)]
        events_out: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Submit {
            workload,
            dispatchers,
            credit_multiplier,
            timeout_s,
            events_out,
        } => {
            let w = load_workload(&workload)?;
            println!("submitting {} tasks to {} dispatchers", w.tasks.len(), dispatchers.len());
            let handle = submit_all(
                &w,
                &dispatchers,
                ClientOptions {
                    credit_multiplier,
                    events_out,
                    ..ClientOptions::default()
                },
            )?;
            let (results, summary) = handle.wait_all(Duration::from_secs(timeout_s))?;
            println!(
                "finished: total={} completed={} makespan={:.3}s throughput={:.1} tasks/s",
                summary.total, summary.completed, summary.makespan_s, summary.throughput_tasks_per_s
            );
            for (status, count) in &summary.status_counts {
                println!("  {status}: {count}");
            }
            for d in &summary.dispatchers {
                println!(
                    "  dispatcher {}: submitted={} credit_limit={} max_outstanding={}",
                    d.address, d.submitted_count, d.credit_limit, d.max_outstanding
                );
            }
            let failures = results
                .iter()
                .filter(|r| r.status != mtcd::protocol::TaskStatus::Success)
                .count();
            if failures > 0 {
                std::process::exit(1);
            }
            Ok(())
        }
    }
}
