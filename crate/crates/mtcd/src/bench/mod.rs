//! Metrics math and the microbenchmark harness: dispatch throughput,
//! efficiency versus task length, per-task overhead, and shared-filesystem
//! contention, with CSV and plot-data emission.

pub mod fsops;
mod harness;
mod report;

pub use fsops::{
    bench_fsops, bench_readwrite, run_fsops_worker, run_rw_worker, FsOp, FsOpsParams, Layout,
    RwMode, WorkerMode, WorkerOutput,
};
pub use harness::{
    bench_dispatch_throughput, bench_efficiency_sweep, sim_efficiency_sweep, LocalStack,
    StackConfig, SweepOutcome, ThroughputOutcome,
};
pub use report::{emit_report, machine_spec, BenchReport, ReportFormat, Series};

/// Completed tasks per second over an elapsed interval.
pub fn throughput(completed_tasks: u64, elapsed_s: f64) -> f64 {
    assert!(elapsed_s > 0.0, "elapsed time must be positive");
    completed_tasks as f64 / elapsed_s
}

/// Average milliseconds of makespan attributable to each task.
pub fn per_task_overhead_ms(makespan_s: f64, num_tasks: u64) -> f64 {
    assert!(num_tasks > 0);
    makespan_s * 1000.0 / num_tasks as f64
}

/// Total busy CPU-seconds over wall time.
pub fn speedup(total_busy_cpu_s: f64, makespan_s: f64) -> f64 {
    assert!(makespan_s > 0.0);
    total_busy_cpu_s / makespan_s
}

/// Sustained tasks/s needed to keep `processors` busy with tasks of the
/// given length.
pub fn required_throughput(processors: u64, task_length_s: f64) -> f64 {
    assert!(processors > 0 && task_length_s > 0.0);
    processors as f64 / task_length_s
}

/// One measured point of the efficiency-vs-task-length experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyPoint {
    pub processors: u64,
    pub task_length_s: f64,
    pub num_tasks: u64,
    pub ideal_makespan_s: f64,
    pub actual_makespan_s: f64,
    /// `ideal / actual`, clamped to 1.0 (timer jitter on tiny runs can push
    /// the raw ratio above 1; the clamp is recorded).
    pub efficiency: f64,
    pub clamped: bool,
}

impl EfficiencyPoint {
    /// From wall-clock measurements in seconds.
    pub fn measured(processors: u64, task_length_s: f64, num_tasks: u64, actual_makespan_s: f64) -> Self {
        assert!(processors > 0 && num_tasks > 0);
        assert!(actual_makespan_s > 0.0);
        let waves = num_tasks.div_ceil(processors);
        let ideal = waves as f64 * task_length_s;
        let raw = ideal / actual_makespan_s;
        let clamped = raw > 1.0;
        if clamped {
            log::warn!(
                "efficiency {raw:.4} > 1 at t={task_length_s}s; clamping to 1.0 (timer jitter)"
            );
        }
        Self {
            processors,
            task_length_s,
            num_tasks,
            ideal_makespan_s: ideal,
            actual_makespan_s,
            efficiency: raw.min(1.0),
            clamped,
        }
    }

    /// From integer-millisecond virtual-clock runs; a zero-overhead
    /// simulation yields efficiency exactly 1.0 because both makespans are
    /// the same integer.
    pub fn from_ms(processors: u64, task_length_ms: u64, num_tasks: u64, actual_makespan_ms: u64) -> Self {
        assert!(processors > 0 && num_tasks > 0);
        assert!(actual_makespan_ms > 0);
        let waves = num_tasks.div_ceil(processors);
        let ideal_ms = waves * task_length_ms;
        let raw = ideal_ms as f64 / actual_makespan_ms as f64;
        let clamped = raw > 1.0;
        Self {
            processors,
            task_length_s: task_length_ms as f64 / 1000.0,
            num_tasks,
            ideal_makespan_s: ideal_ms as f64 / 1000.0,
            actual_makespan_s: actual_makespan_ms as f64 / 1000.0,
            efficiency: raw.min(1.0),
            clamped,
        }
    }

    /// The speedup this point corresponds to when every task keeps one
    /// processor busy for its full length.
    pub fn ideal_speedup(&self) -> f64 {
        self.processors as f64
    }
}

/// Dispatch rates of site batch schedulers, shipped as report context for
/// comparison (not re-measured here).
pub const LRM_COMPARISON_TASKS_PER_S: &[(&str, f64)] = &[
    ("pbs-2.1.8", 0.45),
    ("condor-6.7.2", 0.49),
    ("condor-j2-prototype", 22.0),
    ("cobalt", 0.037),
];

/// Cluster dispatch rate of the C executor on the reference Linux cluster,
/// used as an order-of-magnitude sanity constant.
pub const REFERENCE_CLUSTER_TASKS_PER_S: f64 = 2534.0;
