//! Executor agent: registers with one dispatcher, receives tasks, stages
//! inputs through the node-local cache, forks one application process per
//! slot, and reports exit codes with full timing.
//!
//! One control loop owns the connection; `slots` worker threads run tasks; a
//! heartbeat thread keeps the dispatcher informed. Connection loss kills
//! running task trees and re-registers after exponential backoff.

mod cache;
mod runner;

pub use cache::DataCache;
pub use runner::{
    bulk_copy, copy_stream, execute_synthetic, execute_task, kill_process_group, ExecutionEnv,
    RunnerKind, StageError, DEFAULT_BLOCK_BYTES, SPAWN_FAILURE_EXIT_CODE,
};

use std::collections::HashMap;
use std::io::Write;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use crate::clock::monotonic_ms;
use crate::protocol::{
    decode, encode, Heartbeat, Message, Register, TaskDispatch, TaskResult, TaskStatus,
    PROTOCOL_VERSION,
};

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub dispatcher_addr: String,
    pub slots: u32,
    pub cache_dir: PathBuf,
    pub cache_capacity_bytes: u64,
    /// Stable identity across reconnects; the dispatcher uses it to spot a
    /// returning agent.
    pub address: String,
    pub runner: RunnerKind,
    pub reconnect_base_ms: u64,
    pub reconnect_cap_ms: u64,
    /// Where captured stdout/stderr land; defaults to `<cache_dir>/task-logs`.
    pub task_log_dir: Option<PathBuf>,
}

impl AgentConfig {
    pub fn new(dispatcher_addr: impl Into<String>, slots: u32, cache_dir: impl Into<PathBuf>) -> Self {
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let seq = SEQ.fetch_add(1, Ordering::SeqCst);
        Self {
            dispatcher_addr: dispatcher_addr.into(),
            slots,
            cache_dir: cache_dir.into(),
            cache_capacity_bytes: 1 << 30,
            address: format!("agent-{}-{}", std::process::id(), seq),
            runner: RunnerKind::Process,
            reconnect_base_ms: 1_000,
            reconnect_cap_ms: 30_000,
            task_log_dir: None,
        }
    }
}

/// Observable agent lifecycle, for logs and fault-injection tests.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentEvent {
    Registered { executor_id: String },
    ConnectionLost,
    ReconnectWait { attempt: u32, delay_ms: u64 },
    Suspended,
    ShutdownReceived,
    Stopped,
}

struct AgentShared {
    stop: AtomicBool,
    conn: Mutex<Option<TcpStream>>,
    events: Mutex<Vec<AgentEvent>>,
    executor_id: Mutex<Option<String>>,
    running_pids: Mutex<HashMap<String, i32>>,
    tasks_executed: AtomicU64,
}

impl AgentShared {
    fn push_event(&self, ev: AgentEvent) {
        log::debug!("agent event: {ev:?}");
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push(ev);
    }

    fn sever_connection(&self) {
        let guard = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(stream) = guard.as_ref() {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
    }

    fn kill_running_tasks(&self) {
        let pids: Vec<i32> = {
            let guard = self.running_pids.lock().unwrap_or_else(|e| e.into_inner());
            guard.values().copied().collect()
        };
        for pid in pids {
            kill_process_group(pid);
        }
    }
}

pub struct AgentHandle {
    shared: Arc<AgentShared>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl AgentHandle {
    pub fn events(&self) -> Vec<AgentEvent> {
        self.shared
            .events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn executor_id(&self) -> Option<String> {
        self.shared
            .executor_id
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn tasks_executed(&self) -> u64 {
        self.shared.tasks_executed.load(Ordering::SeqCst)
    }

    /// Abrupt stop: kill running task trees, sever the connection, join.
    /// From the dispatcher's point of view this is a node crash.
    pub fn stop(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.kill_running_tasks();
        self.shared.sever_connection();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Wait for the agent to exit on its own (SHUTDOWN from the dispatcher).
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Run the agent on the calling thread until SHUTDOWN (CLI entry point).
pub fn run_agent(config: AgentConfig) -> std::io::Result<()> {
    let shared = Arc::new(new_shared());
    agent_loop(config, shared);
    Ok(())
}

/// Run the agent on a background thread (tests, provisioner, benches).
pub fn spawn_agent(config: AgentConfig) -> std::io::Result<AgentHandle> {
    let shared = Arc::new(new_shared());
    let loop_shared = Arc::clone(&shared);
    let thread = std::thread::Builder::new()
        .name(format!("agent-{}", config.address))
        .spawn(move || agent_loop(config, loop_shared))?;
    Ok(AgentHandle {
        shared,
        thread: Some(thread),
    })
}

fn new_shared() -> AgentShared {
    AgentShared {
        stop: AtomicBool::new(false),
        conn: Mutex::new(None),
        events: Mutex::new(Vec::new()),
        executor_id: Mutex::new(None),
        running_pids: Mutex::new(HashMap::new()),
        tasks_executed: AtomicU64::new(0),
    }
}

enum ConnOutcome {
    Lost,
    ShutdownReceived,
    Stopped,
    Rejected,
}

fn agent_loop(config: AgentConfig, shared: Arc<AgentShared>) {
    let cache = match DataCache::new(&config.cache_dir, config.cache_capacity_bytes) {
        Ok(c) => Arc::new(c),
        Err(e) => {
            log::error!("cache dir {} unusable: {e}", config.cache_dir.display());
            shared.push_event(AgentEvent::Stopped);
            return;
        }
    };
    let task_log_dir = config
        .task_log_dir
        .clone()
        .unwrap_or_else(|| config.cache_dir.join("task-logs"));

    let mut attempt: u32 = 0;
    while !shared.stop.load(Ordering::SeqCst) {
        match TcpStream::connect(&config.dispatcher_addr) {
            Err(e) => {
                log::info!("connect to {} failed: {e}", config.dispatcher_addr);
                backoff_wait(&shared, &config, &mut attempt);
            }
            Ok(stream) => {
                match serve_connection(
                    stream,
                    &config,
                    &shared,
                    &cache,
                    &task_log_dir,
                    &mut attempt,
                ) {
                    ConnOutcome::ShutdownReceived => break,
                    ConnOutcome::Stopped => break,
                    ConnOutcome::Rejected => break,
                    ConnOutcome::Lost => {
                        shared.push_event(AgentEvent::ConnectionLost);
                        backoff_wait(&shared, &config, &mut attempt);
                    }
                }
            }
        }
    }
    shared.kill_running_tasks();
    shared.push_event(AgentEvent::Stopped);
}

fn backoff_wait(shared: &AgentShared, config: &AgentConfig, attempt: &mut u32) {
    let exp = (*attempt).min(16);
    let delay_ms = config
        .reconnect_base_ms
        .saturating_mul(1u64 << exp)
        .min(config.reconnect_cap_ms);
    shared.push_event(AgentEvent::ReconnectWait {
        attempt: *attempt,
        delay_ms,
    });
    *attempt += 1;
    let deadline = monotonic_ms() + delay_ms;
    while monotonic_ms() < deadline {
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        std::thread::sleep(Duration::from_millis(10.min(delay_ms)));
    }
}

fn send_message(writer: &Mutex<TcpStream>, msg: &Message) -> bool {
    let frame = match encode(msg) {
        Ok(f) => f,
        Err(e) => {
            log::error!("encode failed: {e}");
            return false;
        }
    };
    let mut stream = writer.lock().unwrap_or_else(|e| e.into_inner());
    stream.write_all(&frame).is_ok()
}

fn serve_connection(
    stream: TcpStream,
    config: &AgentConfig,
    shared: &Arc<AgentShared>,
    cache: &Arc<DataCache>,
    task_log_dir: &std::path::Path,
    attempt: &mut u32,
) -> ConnOutcome {
    let _ = stream.set_nodelay(true);
    let mut read_half = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return ConnOutcome::Lost,
    };
    {
        let mut conn = shared.conn.lock().unwrap_or_else(|e| e.into_inner());
        *conn = stream.try_clone().ok();
    }
    let writer = Arc::new(Mutex::new(stream));

    let register = Message::Register(Register {
        protocol_version: PROTOCOL_VERSION,
        slots: config.slots,
        address: config.address.clone(),
    });
    if !send_message(&writer, &register) {
        return ConnOutcome::Lost;
    }
    let ack = match decode(&mut read_half) {
        Ok(Message::RegisterAck(ack)) => ack,
        Ok(Message::Error(e)) => {
            log::error!("registration rejected: {} ({})", e.message, e.code);
            return ConnOutcome::Rejected;
        }
        Ok(other) => {
            log::error!("unexpected {} during registration", other.kind_name());
            return ConnOutcome::Lost;
        }
        Err(_) => return ConnOutcome::Lost,
    };
    *attempt = 0;
    let executor_id = ack.executor_id.clone();
    {
        let mut id = shared.executor_id.lock().unwrap_or_else(|e| e.into_inner());
        *id = Some(executor_id.clone());
    }
    shared.push_event(AgentEvent::Registered {
        executor_id: executor_id.clone(),
    });
    log::info!(
        "registered as {executor_id} ({} slots, heartbeat {} ms)",
        config.slots,
        ack.heartbeat_interval_ms
    );

    let conn_alive = Arc::new(AtomicBool::new(true));
    let draining = Arc::new(AtomicBool::new(false));

    // Heartbeat sender.
    let hb_thread = {
        let writer = Arc::clone(&writer);
        let conn_alive = Arc::clone(&conn_alive);
        let shared = Arc::clone(shared);
        let interval = ack.heartbeat_interval_ms.max(1);
        let executor_id = executor_id.clone();
        std::thread::spawn(move || {
            let mut last = monotonic_ms();
            loop {
                std::thread::sleep(Duration::from_millis(25.min(interval)));
                if !conn_alive.load(Ordering::SeqCst) || shared.stop.load(Ordering::SeqCst) {
                    return;
                }
                if monotonic_ms().saturating_sub(last) < interval {
                    continue;
                }
                last = monotonic_ms();
                let beat = Message::Heartbeat(Heartbeat {
                    executor_id: executor_id.clone(),
                });
                if !send_message(&writer, &beat) {
                    conn_alive.store(false, Ordering::SeqCst);
                    return;
                }
            }
        })
    };

    // Slot workers.
    let (task_tx, task_rx) = mpsc::channel::<TaskDispatch>();
    let task_rx = Arc::new(Mutex::new(task_rx));
    let mut workers = Vec::new();
    for slot in 0..config.slots {
        let task_rx = Arc::clone(&task_rx);
        let writer = Arc::clone(&writer);
        let conn_alive = Arc::clone(&conn_alive);
        let shared = Arc::clone(shared);
        let cache = Arc::clone(cache);
        let runner = config.runner.clone();
        let executor_id = executor_id.clone();
        let task_log_dir = task_log_dir.to_path_buf();
        workers.push(
            std::thread::Builder::new()
                .name(format!("slot-{slot}-{executor_id}"))
                .spawn(move || loop {
                    let dispatch = {
                        let rx = task_rx.lock().unwrap_or_else(|e| e.into_inner());
                        rx.recv()
                    };
                    let Ok(dispatch) = dispatch else { return };
                    if !conn_alive.load(Ordering::SeqCst) {
                        continue; // drain the queue; results are undeliverable
                    }
                    let env = ExecutionEnv {
                        cache: &cache,
                        executor_id: &executor_id,
                        task_log_dir: &task_log_dir,
                        running_pids: &shared.running_pids,
                    };
                    let result = match &runner {
                        RunnerKind::Process => execute_task(&env, &dispatch),
                        RunnerKind::Synthetic { delay } => {
                            execute_synthetic(&env, &dispatch, *delay)
                        }
                    };
                    shared.tasks_executed.fetch_add(1, Ordering::SeqCst);
                    if !send_message(&writer, &Message::TaskResult(result)) {
                        conn_alive.store(false, Ordering::SeqCst);
                        let conn = shared.conn.lock().unwrap_or_else(|e| e.into_inner());
                        if let Some(s) = conn.as_ref() {
                            let _ = s.shutdown(std::net::Shutdown::Both);
                        }
                    }
                })
                .expect("spawn worker"),
        );
    }

    // Control loop: this thread reads frames until the connection dies.
    let outcome = loop {
        match decode(&mut read_half) {
            Ok(Message::TaskDispatch(dispatch)) => {
                if draining.load(Ordering::SeqCst) {
                    // Suspended agents accept no new work; bounce it back as
                    // a retryable failure so it reschedules elsewhere.
                    let now = monotonic_ms();
                    let bounce = TaskResult {
                        task_id: dispatch.task.task_id.clone(),
                        exit_code: -1,
                        status: TaskStatus::SystemFailure,
                        executor_id: executor_id.clone(),
                        t_submitted: dispatch.t_submitted,
                        t_dispatched: dispatch.t_dispatched,
                        t_started: now,
                        t_finished: now,
                        stdout_ref: None,
                        stderr_ref: None,
                    };
                    send_message(&writer, &Message::TaskResult(bounce));
                    continue;
                }
                if task_tx.send(dispatch).is_err() {
                    break ConnOutcome::Lost;
                }
            }
            Ok(Message::Suspend(s)) => {
                log::warn!("suspended by dispatcher: {}", s.reason);
                draining.store(true, Ordering::SeqCst);
                shared.push_event(AgentEvent::Suspended);
            }
            Ok(Message::Shutdown(_)) => {
                shared.push_event(AgentEvent::ShutdownReceived);
                break ConnOutcome::ShutdownReceived;
            }
            Ok(other) => {
                log::debug!("ignoring {}", other.kind_name());
            }
            Err(_) => {
                break if shared.stop.load(Ordering::SeqCst) {
                    ConnOutcome::Stopped
                } else {
                    ConnOutcome::Lost
                };
            }
        }
    };

    conn_alive.store(false, Ordering::SeqCst);
    // The connection is gone either way: results are undeliverable, so
    // running task trees die now rather than running to waste.
    shared.kill_running_tasks();
    shared.sever_connection();
    drop(task_tx);
    for w in workers {
        let _ = w.join();
    }
    let _ = hb_thread.join();
    {
        let mut conn = shared.conn.lock().unwrap_or_else(|e| e.into_inner());
        *conn = None;
    }
    outcome
}
