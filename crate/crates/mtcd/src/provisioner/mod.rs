//! Pset-granularity resource provisioning with a modeled boot cost.
//!
//! Allocations are all-or-nothing blocks of `pset_count x cores_per_pset`
//! cores. Simulated mode books the boot time on a virtual clock so startup
//! experiments run in milliseconds; real mode launches local executor agents
//! (scaled down: a handful of single-slot agents stand in for one pset) and
//! reports ready once they have all registered with the dispatcher.

pub mod sim;

use std::io::Write;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::clock::monotonic_ms;
use crate::executor::{spawn_agent, AgentConfig, AgentHandle, RunnerKind};
use crate::protocol::{decode, encode, Message, Shutdown, StatsRequest};

#[derive(Debug, Error)]
pub enum ProvisionError {
    #[error("allocation failed: {0}")]
    AllocationFailed(String),
    #[error("boot model: {0}")]
    BootModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Piecewise log-linear boot-time model anchored at measured
/// (cores, seconds) points. Anchors are exact; interior core counts are
/// interpolated, and queries outside the anchor range clamp to the nearest
/// anchor so the curve stays non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct BootModel {
    anchors: Vec<(u64, f64)>,
}

impl BootModel {
    /// Published anchors: 125 s to first task on one 256-core pset, 1326 s
    /// at the full 163 840 cores.
    pub fn default_anchors() -> Self {
        Self::from_anchors(vec![(256, 125.0), (163_840, 1326.0)]).expect("default anchors valid")
    }

    pub fn from_anchors(mut anchors: Vec<(u64, f64)>) -> Result<Self, ProvisionError> {
        if anchors.is_empty() {
            return Err(ProvisionError::BootModel("at least one anchor required".into()));
        }
        anchors.sort_by_key(|(c, _)| *c);
        for pair in anchors.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(ProvisionError::BootModel(format!(
                    "duplicate anchor at {} cores",
                    pair[0].0
                )));
            }
            if pair[1].1 < pair[0].1 {
                return Err(ProvisionError::BootModel(
                    "boot seconds must be non-decreasing in cores".into(),
                ));
            }
        }
        if anchors.iter().any(|(c, s)| *c == 0 || *s <= 0.0) {
            return Err(ProvisionError::BootModel(
                "anchors need positive cores and seconds".into(),
            ));
        }
        Ok(Self { anchors })
    }

    /// Parse `cores,seconds` lines (`#` comments allowed).
    pub fn from_config_file(path: &Path) -> Result<Self, ProvisionError> {
        let contents = std::fs::read_to_string(path)?;
        let mut anchors = Vec::new();
        for (idx, raw) in contents.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split([',', ' ', '\t']).filter(|s| !s.is_empty());
            let missing =
                || ProvisionError::BootModel(format!("line {}: expected cores,seconds", idx + 1));
            let cores: u64 = parts
                .next()
                .ok_or_else(missing)?
                .parse()
                .map_err(|e| ProvisionError::BootModel(format!("line {}: {e}", idx + 1)))?;
            let seconds: f64 = parts
                .next()
                .ok_or_else(missing)?
                .parse()
                .map_err(|e| ProvisionError::BootModel(format!("line {}: {e}", idx + 1)))?;
            anchors.push((cores, seconds));
        }
        Self::from_anchors(anchors)
    }

    /// Modeled seconds from power-on to ready for `cores` cores.
    pub fn boot_seconds(&self, cores: u64) -> f64 {
        let first = self.anchors[0];
        let last = *self.anchors.last().expect("non-empty");
        if cores <= first.0 {
            return first.1;
        }
        if cores >= last.0 {
            return last.1;
        }
        if let Some(&(_, s)) = self.anchors.iter().find(|(c, _)| *c == cores) {
            return s;
        }
        let hi = self
            .anchors
            .iter()
            .position(|(c, _)| *c > cores)
            .expect("cores below last anchor");
        let (c1, b1) = self.anchors[hi - 1];
        let (c2, b2) = self.anchors[hi];
        let frac = ((cores as f64).ln() - (c1 as f64).ln()) / ((c2 as f64).ln() - (c1 as f64).ln());
        (b1.ln() + frac * (b2.ln() - b1.ln())).exp()
    }

    pub fn anchors(&self) -> &[(u64, f64)] {
        &self.anchors
    }
}

/// Fraction of a run spent on startup: `startup / (startup + makespan)`.
/// Tends to zero as the workload grows, which is what makes coarse
/// allocations affordable.
pub fn amortized_startup_fraction(startup_s: f64, makespan_s: f64) -> f64 {
    assert!(startup_s >= 0.0 && makespan_s >= 0.0);
    assert!(
        startup_s > 0.0 || makespan_s > 0.0,
        "startup and makespan cannot both be zero"
    );
    startup_s / (startup_s + makespan_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartupBreakdown {
    /// (name, seconds, fraction of total) per component.
    pub components: Vec<(String, f64, f64)>,
    /// Fraction of the total the listed components explain.
    pub coverage: f64,
}

/// Express each named boot component as a fraction of the total and check
/// how much of the total the list explains.
pub fn startup_breakdown(total_boot_s: f64, components: &[(String, f64)]) -> StartupBreakdown {
    assert!(total_boot_s > 0.0);
    let comps: Vec<(String, f64, f64)> = components
        .iter()
        .map(|(name, s)| (name.clone(), *s, s / total_boot_s))
        .collect();
    let coverage = components.iter().map(|(_, s)| s).sum::<f64>() / total_boot_s;
    StartupBreakdown {
        components: comps,
        coverage,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationState {
    Booting,
    Ready,
    Released,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Real,
    Simulated,
}

/// One granted block of executors.
pub struct Allocation {
    pub allocation_id: String,
    pub pset_count: u32,
    pub cores_per_pset: u32,
    pub duration_s: f64,
    pub boot_model: BootModel,
    pub mode: Mode,
    pub state: AllocationState,
    /// Modeled boot duration for this allocation's core count.
    pub boot_seconds: f64,
    /// Virtual ms in simulated mode, monotonic ms in real mode.
    pub t_requested_ms: u64,
    pub t_ready_ms: u64,
    backing: Vec<AgentHandle>,
}

impl std::fmt::Debug for Allocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Allocation")
            .field("allocation_id", &self.allocation_id)
            .field("pset_count", &self.pset_count)
            .field("cores_per_pset", &self.cores_per_pset)
            .field("state", &self.state)
            .field("boot_seconds", &self.boot_seconds)
            .field("executors", &self.backing.len())
            .finish()
    }
}

impl Allocation {
    pub fn total_cores(&self) -> u64 {
        self.pset_count as u64 * self.cores_per_pset as u64
    }

    pub fn executor_count(&self) -> usize {
        self.backing.len()
    }
}

#[derive(Debug, Clone)]
pub struct ProvisionerConfig {
    pub dispatcher_addr: Option<String>,
    /// Desk-scale stand-in: local executor agents launched per pset.
    pub executors_per_pset: u32,
    pub slots_per_executor: u32,
    pub runner: RunnerKind,
    pub boot_model: BootModel,
    /// Root for per-agent cache directories in real mode.
    pub cache_root: PathBuf,
    /// How long to wait for all agents to register before failing, capped by
    /// the allocation duration.
    pub ready_timeout: Duration,
}

impl Default for ProvisionerConfig {
    fn default() -> Self {
        Self {
            dispatcher_addr: None,
            executors_per_pset: 8,
            slots_per_executor: 1,
            runner: RunnerKind::Process,
            boot_model: BootModel::default_anchors(),
            cache_root: std::env::temp_dir().join("mtcd-provision"),
            ready_timeout: Duration::from_secs(30),
        }
    }
}

pub struct Provisioner {
    config: ProvisionerConfig,
    next_allocation: u64,
}

impl Provisioner {
    pub fn new(config: ProvisionerConfig) -> Self {
        Self {
            config,
            next_allocation: 0,
        }
    }

    pub fn config(&self) -> &ProvisionerConfig {
        &self.config
    }

    /// Grant a block at pset granularity. Simulated allocations become ready
    /// after `boot_seconds` of virtual time; real ones spawn local agents and
    /// are ready when every agent has registered.
    pub fn request_allocation(
        &mut self,
        pset_count: u32,
        cores_per_pset: u32,
        duration_s: f64,
        mode: Mode,
    ) -> Result<Allocation, ProvisionError> {
        assert!(pset_count >= 1, "allocations are whole psets");
        assert!(cores_per_pset >= 1);
        let id = format!("alloc-{}", self.next_allocation);
        self.next_allocation += 1;
        let total_cores = pset_count as u64 * cores_per_pset as u64;
        let boot_seconds = self.config.boot_model.boot_seconds(total_cores);

        match mode {
            Mode::Simulated => {
                if boot_seconds > duration_s {
                    return Err(ProvisionError::AllocationFailed(format!(
                        "boot takes {boot_seconds} s but the allocation lasts only {duration_s} s"
                    )));
                }
                let t_ready = (boot_seconds * 1000.0).round() as u64;
                Ok(Allocation {
                    allocation_id: id,
                    pset_count,
                    cores_per_pset,
                    duration_s,
                    boot_model: self.config.boot_model.clone(),
                    mode,
                    state: AllocationState::Ready,
                    boot_seconds,
                    t_requested_ms: 0,
                    t_ready_ms: t_ready,
                    backing: Vec::new(),
                })
            }
            Mode::Real => self.allocate_real(id, pset_count, cores_per_pset, duration_s, boot_seconds),
        }
    }

    fn allocate_real(
        &mut self,
        id: String,
        pset_count: u32,
        cores_per_pset: u32,
        duration_s: f64,
        boot_seconds: f64,
    ) -> Result<Allocation, ProvisionError> {
        let dispatcher = self.config.dispatcher_addr.clone().ok_or_else(|| {
            ProvisionError::AllocationFailed("real mode needs a dispatcher address".into())
        })?;
        let agents_wanted = pset_count as usize * self.config.executors_per_pset as usize;
        let t_requested = monotonic_ms();
        let baseline = query_registered(&dispatcher)?;

        let mut backing = Vec::with_capacity(agents_wanted);
        for i in 0..agents_wanted {
            let mut cfg = AgentConfig::new(
                dispatcher.clone(),
                self.config.slots_per_executor,
                self.config.cache_root.join(&id).join(format!("agent-{i}")),
            );
            cfg.runner = self.config.runner.clone();
            backing.push(spawn_agent(cfg)?);
        }

        let deadline = monotonic_ms()
            + self
                .config
                .ready_timeout
                .min(Duration::from_secs_f64(duration_s))
                .as_millis() as u64;
        loop {
            let registered = query_registered(&dispatcher)?;
            if registered >= baseline + agents_wanted as u64 {
                break;
            }
            if monotonic_ms() > deadline {
                for agent in backing {
                    agent.stop();
                }
                return Err(ProvisionError::AllocationFailed(format!(
                    "only {} of {agents_wanted} executors registered before the deadline",
                    registered.saturating_sub(baseline)
                )));
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        log::info!("{id}: {agents_wanted} executors registered");
        Ok(Allocation {
            allocation_id: id,
            pset_count,
            cores_per_pset,
            duration_s,
            boot_model: self.config.boot_model.clone(),
            mode: Mode::Real,
            state: AllocationState::Ready,
            boot_seconds,
            t_requested_ms: t_requested,
            t_ready_ms: monotonic_ms(),
            backing,
        })
    }

    /// Shut the allocation's executors down. Idempotent; releasing a booting
    /// simulated allocation simply abandons the boot.
    pub fn release(&mut self, allocation: &mut Allocation) -> Result<(), ProvisionError> {
        if allocation.state == AllocationState::Released {
            return Ok(());
        }
        if allocation.mode == Mode::Real {
            if let Some(dispatcher) = &self.config.dispatcher_addr {
                if let Err(e) = send_shutdown_all(dispatcher) {
                    log::warn!("shutdown request failed: {e}");
                }
            }
            // Give agents a moment to exit via SHUTDOWN, then force the rest.
            let deadline = monotonic_ms() + 5_000;
            while monotonic_ms() < deadline {
                let all_stopped = allocation
                    .backing
                    .iter()
                    .all(|a| a.events().contains(&crate::executor::AgentEvent::Stopped));
                if all_stopped {
                    break;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            for agent in allocation.backing.drain(..) {
                agent.stop();
            }
        }
        allocation.state = AllocationState::Released;
        Ok(())
    }
}

fn query_registered(dispatcher: &str) -> Result<u64, ProvisionError> {
    let stream = TcpStream::connect(dispatcher)?;
    stream.set_nodelay(true).ok();
    let mut read_half = stream.try_clone()?;
    let frame = encode(&Message::StatsRequest(StatsRequest {})).expect("encodes");
    (&stream).write_all(&frame)?;
    match decode(&mut read_half) {
        Ok(Message::StatsReply(reply)) => Ok(reply.registered_executors),
        Ok(other) => Err(ProvisionError::AllocationFailed(format!(
            "unexpected {} from dispatcher",
            other.kind_name()
        ))),
        Err(e) => Err(ProvisionError::AllocationFailed(e.to_string())),
    }
}

fn send_shutdown_all(dispatcher: &str) -> std::io::Result<()> {
    let stream = TcpStream::connect(dispatcher)?;
    let frame = encode(&Message::Shutdown(Shutdown {
        executor_ids: vec![],
    }))
    .expect("encodes");
    (&stream).write_all(&frame)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boot_anchors_are_exact() {
        let m = BootModel::default_anchors();
        assert_eq!(m.boot_seconds(256), 125.0);
        assert_eq!(m.boot_seconds(163_840), 1326.0);
    }

    #[test]
    fn boot_time_clamps_outside_anchor_range() {
        let m = BootModel::default_anchors();
        assert_eq!(m.boot_seconds(1), 125.0);
        assert_eq!(m.boot_seconds(1 << 30), 1326.0);
    }

    #[test]
    fn interior_boot_time_matches_log_linear_oracle() {
        let m = BootModel::default_anchors();
        // Independent evaluation of the interpolation rule at 4096 cores.
        let frac = ((4096f64).ln() - (256f64).ln()) / ((163_840f64).ln() - (256f64).ln());
        let expected = (125f64.ln() + frac * (1326f64.ln() - 125f64.ln())).exp();
        let got = m.boot_seconds(4096);
        assert!((got - expected).abs() < 1e-9, "got {got}, want {expected}");
        assert!(got > 125.0 && got < 1326.0);
    }

    #[test]
    fn boot_time_monotone_over_powers_of_two() {
        // Brute-force monotonicity across the core range at powers of 2.
        let m = BootModel::default_anchors();
        let mut prev = 0.0;
        let mut cores = 256u64;
        while cores <= 163_840 {
            let b = m.boot_seconds(cores);
            assert!(b >= prev, "boot_seconds({cores}) = {b} < {prev}");
            prev = b;
            cores *= 2;
        }
        assert!(m.boot_seconds(163_840) >= prev);
    }

    #[test]
    fn multi_anchor_model_interpolates_piecewise() {
        let m = BootModel::from_anchors(vec![(256, 125.0), (4096, 300.0), (163_840, 1326.0)])
            .unwrap();
        assert_eq!(m.boot_seconds(4096), 300.0);
        let below = m.boot_seconds(1024);
        let above = m.boot_seconds(32_768);
        assert!(below > 125.0 && below < 300.0);
        assert!(above > 300.0 && above < 1326.0);
    }

    #[test]
    fn decreasing_anchors_rejected() {
        assert!(BootModel::from_anchors(vec![(256, 125.0), (512, 100.0)]).is_err());
        assert!(BootModel::from_anchors(vec![]).is_err());
        assert!(BootModel::from_anchors(vec![(0, 5.0)]).is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boot.conf");
        std::fs::write(&path, "# anchors\n256,125\n163840,1326\n").unwrap();
        let m = BootModel::from_config_file(&path).unwrap();
        assert_eq!(m.boot_seconds(256), 125.0);
        assert_eq!(m.boot_seconds(163_840), 1326.0);
    }

    #[test]
    fn amortization_basics() {
        assert_eq!(amortized_startup_fraction(0.0, 10.0), 0.0);
        assert_eq!(amortized_startup_fraction(1326.0, 1326.0), 0.5);
    }

    #[test]
    fn amortization_of_one_pset_boot_over_screening_run() {
        // 125 s boot over a 2807 s workload.
        let f = amortized_startup_fraction(125.0, 2807.0);
        assert!((f - 125.0 / 2932.0).abs() < 1e-12);
        assert_eq!((f * 10_000.0).round() / 10_000.0, 0.0426);
    }

    #[test]
    fn amortization_vanishes_with_makespan() {
        let mut prev = 1.0;
        for k in 1..=9 {
            let makespan = 10f64.powi(k);
            let f = amortized_startup_fraction(1326.0, makespan);
            assert!(f < prev);
            prev = f;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn breakdown_covers_known_components() {
        // 708 + 213 + 55 + 85 of 1090 s explains over 97%.
        let comps = vec![
            ("shared-fs mount".to_string(), 708.0),
            ("kernel+ramdisk send".to_string(), 213.0),
            ("nfs mount".to_string(), 55.0),
            ("service start".to_string(), 85.0),
        ];
        let b = startup_breakdown(1090.0, &comps);
        assert!(b.coverage >= 0.97, "coverage {}", b.coverage);
        assert!(b.coverage < 1.0);
        assert!((b.components[0].2 - 708.0 / 1090.0).abs() < 1e-12);
    }

    #[test]
    fn breakdown_single_component_is_total() {
        let b = startup_breakdown(42.0, &[("all".to_string(), 42.0)]);
        assert_eq!(b.coverage, 1.0);
        assert_eq!(b.components[0].2, 1.0);
    }

    #[test]
    fn breakdown_empty_list_covers_nothing() {
        let b = startup_breakdown(42.0, &[]);
        assert_eq!(b.coverage, 0.0);
        assert!(b.components.is_empty());
    }

    #[test]
    fn simulated_allocation_is_pset_atomic_and_books_boot_time() {
        let mut p = Provisioner::new(ProvisionerConfig::default());
        let alloc = p
            .request_allocation(4, 256, 3600.0, Mode::Simulated)
            .unwrap();
        assert_eq!(alloc.total_cores(), 1024);
        assert_eq!(alloc.total_cores() % alloc.cores_per_pset as u64, 0);
        assert_eq!(alloc.state, AllocationState::Ready);
        let expected_ms = (alloc.boot_model.boot_seconds(1024) * 1000.0).round() as u64;
        assert_eq!(alloc.t_ready_ms - alloc.t_requested_ms, expected_ms);
    }

    #[test]
    fn simulated_allocation_fails_when_boot_exceeds_duration() {
        let mut p = Provisioner::new(ProvisionerConfig::default());
        let err = p
            .request_allocation(640, 256, 60.0, Mode::Simulated)
            .unwrap_err();
        assert!(matches!(err, ProvisionError::AllocationFailed(_)));
    }

    #[test]
    fn release_is_idempotent() {
        let mut p = Provisioner::new(ProvisionerConfig::default());
        let mut alloc = p
            .request_allocation(1, 256, 3600.0, Mode::Simulated)
            .unwrap();
        p.release(&mut alloc).unwrap();
        assert_eq!(alloc.state, AllocationState::Released);
        p.release(&mut alloc).unwrap();
        assert_eq!(alloc.state, AllocationState::Released);
    }

    #[test]
    fn release_during_boot_abandons_it() {
        let mut p = Provisioner::new(ProvisionerConfig::default());
        let mut alloc = p
            .request_allocation(1, 256, 3600.0, Mode::Simulated)
            .unwrap();
        alloc.state = AllocationState::Booting;
        p.release(&mut alloc).unwrap();
        assert_eq!(alloc.state, AllocationState::Released);
    }
}
