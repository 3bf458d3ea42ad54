use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use mtcd::provisioner::{
    amortized_startup_fraction, BootModel, Mode, Provisioner, ProvisionerConfig,
};

#[derive(Parser)]
#[command(name = "provision", about = "Pset-granularity resource provisioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Real,
    Simulated,
}

#[derive(Subcommand)]
enum Command {
    /// Request an allocation and (in real mode) hold it until interrupted.
    Start {
        #[arg(long)]
        psets: u32,
        #[arg(long, default_value_t = 256)]
        cores_per_pset: u32,
        /// Local executor agents standing in for one pset in real mode.
        #[arg(long, default_value_t = 8)]
        scale_factor: u32,
        #[arg(long, default_value_t = 3600.0)]
        duration_s: f64,
        #[arg(long)]
        dispatcher: Option<String>,
        #[arg(long, value_enum, default_value_t = CliMode::Simulated)]
        mode: CliMode,
        /// Boot-model anchor file (`cores,seconds` per line).
        #[arg(long)]
        boot_config: Option<PathBuf>,
        #[arg(long, default_value = "/tmp/mtcd-provision")]
        cache_root: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Start {
            psets,
            cores_per_pset,
            scale_factor,
            duration_s,
            dispatcher,
            mode,
            boot_config,
            cache_root,
        } => {
            let boot_model = match boot_config {
                Some(path) => BootModel::from_config_file(&path)?,
                None => BootModel::default_anchors(),
            };
            let mut provisioner = Provisioner::new(ProvisionerConfig {
                dispatcher_addr: dispatcher,
                executors_per_pset: scale_factor,
                boot_model,
                cache_root,
                ..ProvisionerConfig::default()
            });
            let mode = match mode {
                CliMode::Real => Mode::Real,
                CliMode::Simulated => Mode::Simulated,
            };
            let mut alloc =
                provisioner.request_allocation(psets, cores_per_pset, duration_s, mode)?;
            println!(
                "{}: {} psets x {} cores = {} cores, modeled boot {:.1}s",
                alloc.allocation_id,
                alloc.pset_count,
                alloc.cores_per_pset,
                alloc.total_cores(),
                alloc.boot_seconds
            );
            println!(
                "startup fraction over this allocation's lifetime: {:.4}",
                amortized_startup_fraction(alloc.boot_seconds, duration_s)
            );
            match mode {
                Mode::Simulated => {
                    println!(
                        "simulated: ready at virtual t={} ms",
                        alloc.t_ready_ms
                    );
                }
                Mode::Real => {
                    println!(
                        "real: {} executors registered; holding for {duration_s}s",
                        alloc.executor_count()
                    );
                    std::thread::sleep(std::time::Duration::from_secs_f64(duration_s));
                    provisioner.release(&mut alloc)?;
                    println!("released");
                }
            }
            Ok(())
        }
    }
}
