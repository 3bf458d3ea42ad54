//! Orchestration of desk-scale runs: bring up dispatchers and local
//! executor agents, push a synthetic workload through the client, and turn
//! the result timestamps into throughput/efficiency reports.

use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::client::{self, ClientOptions, RunSummary, Workload};
use crate::dispatcher::{serve, DispatcherConfig, ServerConfig, ServerHandle};
use crate::executor::{spawn_agent, AgentConfig, AgentHandle, RunnerKind};
use crate::protocol::{TaskResult, TaskStatus};
use crate::provisioner::sim::simulate_fifo_run;

use super::report::{BenchReport, Series};
use super::EfficiencyPoint;

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub dispatchers: usize,
    pub executors_per_dispatcher: usize,
    pub slots_per_executor: u32,
    pub runner: RunnerKind,
    pub dispatcher_config: DispatcherConfig,
    pub base_dir: PathBuf,
}

impl StackConfig {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            dispatchers: 1,
            executors_per_dispatcher: 4,
            slots_per_executor: 1,
            runner: RunnerKind::Process,
            dispatcher_config: DispatcherConfig::default(),
            base_dir: base_dir.into(),
        }
    }

    pub fn total_slots(&self) -> u64 {
        self.dispatchers as u64
            * self.executors_per_dispatcher as u64
            * self.slots_per_executor as u64
    }
}

/// A running set of dispatchers plus their local executor agents.
pub struct LocalStack {
    servers: Vec<ServerHandle>,
    agents: Vec<Option<AgentHandle>>,
    addrs: Vec<String>,
}

impl LocalStack {
    /// Start everything and wait until every agent has registered.
    pub fn start(cfg: &StackConfig) -> std::io::Result<Self> {
        let mut servers = Vec::new();
        let mut addrs = Vec::new();
        for _ in 0..cfg.dispatchers {
            let server = serve(ServerConfig {
                bind: "127.0.0.1:0".into(),
                dispatcher: cfg.dispatcher_config.clone(),
                log_dir: None,
                tick_ms: 50,
            })?;
            addrs.push(server.local_addr().to_string());
            servers.push(server);
        }
        let mut agents = Vec::new();
        for (d, addr) in addrs.iter().enumerate() {
            for e in 0..cfg.executors_per_dispatcher {
                let mut agent_cfg = AgentConfig::new(
                    addr.clone(),
                    cfg.slots_per_executor,
                    cfg.base_dir.join(format!("d{d}-e{e}")),
                );
                agent_cfg.runner = cfg.runner.clone();
                agent_cfg.reconnect_base_ms = 100;
                agent_cfg.reconnect_cap_ms = 1_000;
                agents.push(Some(spawn_agent(agent_cfg)?));
            }
        }
        let stack = Self {
            servers,
            agents,
            addrs,
        };
        stack.wait_registered(cfg.executors_per_dispatcher as u64, Duration::from_secs(20))?;
        Ok(stack)
    }

    fn wait_registered(&self, per_dispatcher: u64, timeout: Duration) -> std::io::Result<()> {
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let ready = self
                .servers
                .iter()
                .all(|s| s.stats().registered_executors >= per_dispatcher);
            if ready {
                return Ok(());
            }
            if std::time::Instant::now() > deadline {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::TimedOut,
                    "executors did not all register",
                ));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn addresses(&self) -> &[String] {
        &self.addrs
    }

    pub fn servers(&self) -> &[ServerHandle] {
        &self.servers
    }

    pub fn agent(&self, idx: usize) -> Option<&AgentHandle> {
        self.agents.get(idx).and_then(|a| a.as_ref())
    }

    pub fn agent_count(&self) -> usize {
        self.agents.iter().filter(|a| a.is_some()).count()
    }

    /// Simulate a node crash: kill the agent's running task trees and sever
    /// its connection without any goodbye.
    pub fn crash_agent(&mut self, idx: usize) {
        if let Some(agent) = self.agents.get_mut(idx).and_then(Option::take) {
            agent.stop();
        }
    }

    pub fn shutdown(mut self) {
        for agent in self.agents.iter_mut().filter_map(Option::take) {
            agent.stop();
        }
        for server in self.servers.drain(..) {
            server.shutdown();
        }
    }
}

fn run_workload(
    addrs: &[String],
    workload: &Workload,
    timeout: Duration,
) -> Result<(Vec<TaskResult>, RunSummary), client::ClientError> {
    let handle = client::submit_all(workload, addrs, ClientOptions::default())?;
    handle.wait_all(timeout)
}

/// Sustained rate over the middle 80% of completions, excluding ramp-up and
/// ramp-down.
pub fn sustained_throughput(finish_times_ms: &mut [u64]) -> Option<f64> {
    if finish_times_ms.len() < 10 {
        return None;
    }
    finish_times_ms.sort_unstable();
    let n = finish_times_ms.len();
    let lo = (n as f64 * 0.10).floor() as usize;
    let hi = ((n as f64 * 0.90).ceil() as usize).min(n) - 1;
    if hi <= lo || finish_times_ms[hi] == finish_times_ms[lo] {
        return None;
    }
    let window_s = (finish_times_ms[hi] - finish_times_ms[lo]) as f64 / 1000.0;
    Some((hi - lo) as f64 / window_s)
}

#[derive(Debug)]
pub struct ThroughputOutcome {
    pub report: BenchReport,
    pub completed: u64,
    pub makespan_s: f64,
    pub overall_tasks_per_s: f64,
    pub sustained_tasks_per_s: f64,
}

/// Dispatch-rate benchmark: a burst of no-op tasks over a fresh local
/// stack. With synthetic zero-delay executors the sustained figure is the
/// dispatcher-loop ceiling itself.
pub fn bench_dispatch_throughput(
    slots: usize,
    num_tasks: usize,
    dispatchers: usize,
    runner: RunnerKind,
    base_dir: &Path,
    timeout: Duration,
) -> Result<ThroughputOutcome, Box<dyn std::error::Error>> {
    assert!(dispatchers >= 1 && slots >= dispatchers);
    let cfg = StackConfig {
        dispatchers,
        executors_per_dispatcher: slots / dispatchers,
        slots_per_executor: 1,
        runner,
        dispatcher_config: DispatcherConfig::default(),
        base_dir: base_dir.to_path_buf(),
    };
    let stack = LocalStack::start(&cfg)?;
    let workload = client::sleep_workload(num_tasks, 0.0, "thr");
    let outcome = run_workload(stack.addresses(), &workload, timeout);
    stack.shutdown();
    let (results, summary) = outcome?;

    let mut finishes: Vec<u64> = results
        .iter()
        .filter(|r| r.status == TaskStatus::Success)
        .map(|r| r.t_finished)
        .collect();
    let sustained = sustained_throughput(&mut finishes).unwrap_or(0.0);
    let overall = summary.throughput_tasks_per_s;

    let mut report = BenchReport::new("dispatch_throughput", format!("d{dispatchers}_s{slots}"))
        .with_param("slots", slots)
        .with_param("num_tasks", num_tasks)
        .with_param("dispatchers", dispatchers)
        .with_param("runner", runner_name(&cfg.runner));
    report.samples = results
        .iter()
        .filter(|r| r.t_finished >= r.t_submitted && !r.executor_id.is_empty())
        .map(|r| (r.t_finished - r.t_submitted) as f64)
        .collect();
    report.partial = summary.completed < num_tasks as u64;
    report
        .derived
        .insert("overall_tasks_per_s".into(), overall);
    report
        .derived
        .insert("sustained_tasks_per_s".into(), sustained);
    report
        .derived
        .insert("makespan_s".into(), summary.makespan_s);
    report.derived.insert(
        "per_task_overhead_ms".into(),
        if summary.completed > 0 {
            super::per_task_overhead_ms(summary.makespan_s, summary.completed)
        } else {
            0.0
        },
    );

    Ok(ThroughputOutcome {
        report,
        completed: summary.completed,
        makespan_s: summary.makespan_s,
        overall_tasks_per_s: overall,
        sustained_tasks_per_s: sustained,
    })
}

fn runner_name(runner: &RunnerKind) -> &'static str {
    match runner {
        RunnerKind::Process => "process",
        RunnerKind::Synthetic { .. } => "synthetic",
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub points: Vec<EfficiencyPoint>,
    pub report: BenchReport,
}

/// Efficiency versus task length on a live local stack: sleep tasks with no
/// I/O, one point per length, measured makespan against the ideal
/// `ceil(W/P) x t`.
pub fn bench_efficiency_sweep(
    slots: usize,
    task_lengths_s: &[f64],
    tasks_per_point: usize,
    base_dir: &Path,
) -> Result<SweepOutcome, Box<dyn std::error::Error>> {
    let cfg = StackConfig {
        dispatchers: 1,
        executors_per_dispatcher: slots,
        slots_per_executor: 1,
        runner: RunnerKind::Process,
        dispatcher_config: DispatcherConfig::default(),
        base_dir: base_dir.to_path_buf(),
    };
    let stack = LocalStack::start(&cfg)?;
    let mut points = Vec::new();
    let mut samples = Vec::new();
    let mut series = Vec::new();
    let run = (|| -> Result<(), Box<dyn std::error::Error>> {
        for (i, &t) in task_lengths_s.iter().enumerate() {
            if t <= 0.0 {
                log::warn!("skipping degenerate task length {t}: ideal makespan is zero");
                continue;
            }
            let workload =
                client::sleep_workload(tasks_per_point, t, &format!("eff{i}"));
            let budget = Duration::from_secs_f64(
                (tasks_per_point as f64 / slots as f64) * (t + 2.0) + 60.0,
            );
            let (results, summary) = run_workload(stack.addresses(), &workload, budget)?;
            let ok = results
                .iter()
                .filter(|r| r.status == TaskStatus::Success)
                .count();
            if ok != tasks_per_point {
                return Err(format!("{} of {tasks_per_point} tasks succeeded", ok).into());
            }
            let point =
                EfficiencyPoint::measured(slots as u64, t, tasks_per_point as u64, summary.makespan_s);
            samples.push(summary.makespan_s * 1000.0);
            series.push(Series {
                label: format!("efficiency_t{t}"),
                points: vec![(slots as f64, point.efficiency)],
            });
            points.push(point);
        }
        Ok(())
    })();
    stack.shutdown();
    run?;

    let mut report = BenchReport::new("efficiency_sweep", format!("s{slots}_w{tasks_per_point}"))
        .with_param("slots", slots)
        .with_param("tasks_per_point", tasks_per_point);
    report.samples = samples;
    report.series = series;
    for p in &points {
        report
            .derived
            .insert(format!("efficiency_t{}", p.task_length_s), p.efficiency);
    }
    Ok(SweepOutcome { points, report })
}

/// Virtual-clock sweep through the provisioned-simulation path: zero
/// dispatch overhead, integer-millisecond clock, so every point's
/// efficiency is exactly 1.0.
pub fn sim_efficiency_sweep(
    slots: u64,
    task_lengths_ms: &[u64],
    tasks_per_point: u64,
    overhead_ms: u64,
) -> Vec<EfficiencyPoint> {
    task_lengths_ms
        .iter()
        .filter(|&&t| t > 0)
        .map(|&t| {
            let makespan = simulate_fifo_run(slots, tasks_per_point, t, overhead_ms);
            EfficiencyPoint::from_ms(slots, t, tasks_per_point, makespan)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_sweep_zero_overhead_is_exactly_ideal() {
        let points = sim_efficiency_sweep(64, &[250, 500, 1_000, 2_000, 4_000], 640, 0);
        assert_eq!(points.len(), 5);
        for p in points {
            assert_eq!(p.efficiency, 1.0, "t={}s", p.task_length_s);
            assert!(!p.clamped);
        }
    }

    #[test]
    fn sim_sweep_with_overhead_matches_model() {
        // With per-task overhead o, a full-wave run has efficiency t/(t+o).
        let overhead = 50;
        let points = sim_efficiency_sweep(16, &[1_000], 160, overhead);
        let expected = 1_000.0 / (1_000.0 + overhead as f64);
        assert!((points[0].efficiency - expected).abs() < 1e-12);
    }

    #[test]
    fn sim_sweep_efficiency_nondecreasing_in_task_length() {
        let points = sim_efficiency_sweep(32, &[250, 500, 1_000, 2_000, 4_000, 8_000], 320, 25);
        for pair in points.windows(2) {
            assert!(pair[1].efficiency >= pair[0].efficiency);
        }
    }

    #[test]
    fn sim_sweep_skips_degenerate_zero_length() {
        let points = sim_efficiency_sweep(8, &[0, 1_000], 80, 0);
        assert_eq!(points.len(), 1);
    }

    #[test]
    fn sustained_window_is_middle_eighty_percent() {
        // 100 completions at 1 ms spacing: the middle 80 span 80 ms.
        let mut finishes: Vec<u64> = (0..100u64).map(|i| 1_000 + i).collect();
        let rate = sustained_throughput(&mut finishes).unwrap();
        assert!((rate - 1000.0).abs() < 15.0, "{rate}");
        let mut too_few = vec![1, 2, 3];
        assert!(sustained_throughput(&mut too_few).is_none());
    }
}
