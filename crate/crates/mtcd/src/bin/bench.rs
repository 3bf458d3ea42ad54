use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};
use mtcd::bench::{
    bench_dispatch_throughput, bench_efficiency_sweep, bench_fsops, bench_readwrite, emit_report,
    run_fsops_worker, run_rw_worker, sim_efficiency_sweep, FsOp, FsOpsParams, Layout,
    ReportFormat, RwMode, WorkerMode,
};
use mtcd::executor::RunnerKind;

#[derive(Parser)]
#[command(name = "bench", about = "Dispatch and filesystem microbenchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sleep-0 dispatch rate over a fresh local stack.
    Throughput {
        #[arg(long, default_value_t = 64)]
        slots: usize,
        #[arg(long, default_value_t = 50_000)]
        num_tasks: usize,
        #[arg(long, default_value_t = 1)]
        dispatchers: usize,
        /// Replace process forks with synthetic zero-delay completions to
        /// measure the dispatcher-loop ceiling.
        #[arg(long)]
        simulated: bool,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        #[arg(long, default_value = "/tmp/mtcd-bench")]
        work_dir: PathBuf,
    },
    /// Efficiency vs task length on the live stack, or on the virtual clock.
    Efficiency {
        #[arg(long, default_value_t = 64)]
        slots: usize,
        /// Comma-separated task lengths in seconds.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 1.0, 2.0, 4.0])]
        task_lengths: Vec<f64>,
        #[arg(long, default_value_t = 640)]
        tasks_per_point: usize,
        /// Virtual-clock run with the given per-task overhead in ms.
        #[arg(long)]
        simulated: bool,
        #[arg(long, default_value_t = 0)]
        sim_overhead_ms: u64,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        #[arg(long, default_value = "/tmp/mtcd-bench")]
        work_dir: PathBuf,
    },
    /// Metadata operation costs under concurrency.
    Fsops {
        #[arg(long)]
        op: FsOp,
        #[arg(long, default_value_t = 64)]
        concurrency: usize,
        #[arg(long)]
        layout: Layout,
        #[arg(long)]
        target_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        ops_per_worker: usize,
        /// Use threads instead of worker processes.
        #[arg(long)]
        threads: bool,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Bulk read / read+write rates.
    Readwrite {
        #[arg(long, default_value_t = 10 << 20)]
        file_size_bytes: u64,
        #[arg(long, default_value_t = 16)]
        concurrency: usize,
        #[arg(long)]
        mode: RwMode,
        #[arg(long, default_value_t = 131072)]
        block_bytes: usize,
        #[arg(long)]
        target_dir: PathBuf,
        #[arg(long)]
        threads: bool,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Internal: one fsops worker (used for process-mode barriers).
    #[command(hide = true)]
    FsopsWorker {
        #[arg(long)]
        op: FsOp,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        worker: usize,
        #[arg(long)]
        ops: usize,
        #[arg(long)]
        start_at_ms: u64,
        #[arg(long)]
        script: Option<PathBuf>,
    },
    /// Internal: one read/readwrite worker.
    #[command(hide = true)]
    RwWorker {
        #[arg(long)]
        mode: RwMode,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        block_bytes: usize,
        #[arg(long)]
        start_at_ms: u64,
    },
}

fn worker_mode(threads: bool) -> WorkerMode {
    if threads {
        WorkerMode::Threads
    } else {
        WorkerMode::Processes {
            worker_bin: std::env::current_exe().expect("own path"),
        }
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Throughput {
            slots,
            num_tasks,
            dispatchers,
            simulated,
            out,
            work_dir,
        } => {
            let runner = if simulated {
                RunnerKind::Synthetic {
                    delay: Duration::ZERO,
                }
            } else {
                RunnerKind::Process
            };
            let outcome = bench_dispatch_throughput(
                slots,
                num_tasks,
                dispatchers,
                runner,
                &work_dir,
                Duration::from_secs(1800),
            )
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            println!(
                "completed {} tasks in {:.2}s: overall {:.0} tasks/s, sustained {:.0} tasks/s",
                outcome.completed,
                outcome.makespan_s,
                outcome.overall_tasks_per_s,
                outcome.sustained_tasks_per_s
            );
            let files = emit_report(&outcome.report, ReportFormat::Csv, &out)?;
            println!("wrote {}", files[0].display());
            Ok(())
        }
        Command::Efficiency {
            slots,
            task_lengths,
            tasks_per_point,
            simulated,
            sim_overhead_ms,
            out,
            work_dir,
        } => {
            if simulated {
                let lengths_ms: Vec<u64> =
                    task_lengths.iter().map(|t| (t * 1000.0).round() as u64).collect();
                let points = sim_efficiency_sweep(
                    slots as u64,
                    &lengths_ms,
                    tasks_per_point as u64,
                    sim_overhead_ms,
                );
                for p in &points {
                    println!(
                        "t={:>6.2}s  ideal={:>8.2}s  actual={:>8.2}s  efficiency={:.4}",
                        p.task_length_s, p.ideal_makespan_s, p.actual_makespan_s, p.efficiency
                    );
                }
                return Ok(());
            }
            let sweep = bench_efficiency_sweep(slots, &task_lengths, tasks_per_point, &work_dir)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            for p in &sweep.points {
                println!(
                    "t={:>6.2}s  ideal={:>8.2}s  actual={:>8.2}s  efficiency={:.4}{}",
                    p.task_length_s,
                    p.ideal_makespan_s,
                    p.actual_makespan_s,
                    p.efficiency,
                    if p.clamped { " (clamped)" } else { "" }
                );
            }
            let mut files = emit_report(&sweep.report, ReportFormat::Csv, &out)?;
            files.extend(emit_report(&sweep.report, ReportFormat::PlotData, &out)?);
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::Fsops {
            op,
            concurrency,
            layout,
            target_dir,
            ops_per_worker,
            threads,
            out,
        } => {
            let report = bench_fsops(&FsOpsParams {
                op,
                concurrency,
                layout,
                target_dir,
                ops_per_worker,
                mode: worker_mode(threads),
            })?;
            let agg = report.aggregates();
            println!(
                "{} x{} {}: mean {:.3} ms, p90 {:.3} ms, aggregate {:.1} ops/s",
                op.name(),
                concurrency,
                layout.name(),
                agg.mean,
                agg.p90,
                report.derived.get("aggregate_ops_per_s").copied().unwrap_or(0.0)
            );
            let files = emit_report(&report, ReportFormat::Csv, &out)?;
            println!("wrote {}", files[0].display());
            Ok(())
        }
        Command::Readwrite {
            file_size_bytes,
            concurrency,
            mode,
            block_bytes,
            target_dir,
            threads,
            out,
        } => {
            let report = bench_readwrite(
                file_size_bytes,
                concurrency,
                mode,
                block_bytes,
                &target_dir,
                &worker_mode(threads),
            )?;
            println!(
                "{} x{} ({} B blocks): aggregate {:.1} MB/s",
                mode.name(),
                concurrency,
                block_bytes,
                report.derived.get("aggregate_mb_per_s").copied().unwrap_or(0.0)
            );
            let files = emit_report(&report, ReportFormat::Csv, &out)?;
            println!("wrote {}", files[0].display());
            Ok(())
        }
        Command::FsopsWorker {
            op,
            dir,
            worker,
            ops,
            start_at_ms,
            script,
        } => {
            let out = run_fsops_worker(op, &dir, worker, ops, start_at_ms, script.as_deref())?;
            out.write_to(std::io::stdout().lock())?;
            Ok(())
        }
        Command::RwWorker {
            mode,
            input,
            output,
            block_bytes,
            start_at_ms,
        } => {
            let out = run_rw_worker(mode, &input, output.as_deref(), block_bytes, start_at_ms)?;
            out.write_to(std::io::stdout().lock())?;
            Ok(())
        }
    }
}
