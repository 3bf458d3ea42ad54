//! Dispatcher state machine: wait queue, executor registry, counters.
//!
//! All scheduling and reliability decisions live here, free of any I/O, with
//! every operation taking the current time explicitly. The network layer
//! serializes calls through one lock and carries out the returned effects
//! (frames to send). Tests drive the same entry points with a scripted
//! clock.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::protocol::{
    ErrorMsg, Register, RegisterAck, RejectedTask, StatsReply, Submit, SubmitAck, TaskDescriptor,
    TaskDispatch, TaskResult, TaskStatus, PROTOCOL_VERSION,
};

/// Identifies the client connection that owns a task; results route back
/// to it.
pub type ClientId = u64;

#[derive(Debug, Clone)]
pub struct DispatcherConfig {
    pub heartbeat_interval_ms: u64,
    /// Missed beats before an executor is declared dead.
    pub missed_heartbeats_dead: u32,
    pub suspend_failure_threshold: usize,
    pub suspend_window_ms: u64,
    /// Cap on per-task retries; descriptors asking for more are clamped.
    pub max_retries: u32,
    /// Trailing window for the throughput gauge.
    pub throughput_window_ms: u64,
}

impl Default for DispatcherConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval_ms: 5_000,
            missed_heartbeats_dead: 3,
            suspend_failure_threshold: 3,
            suspend_window_ms: 60_000,
            max_retries: 3,
            throughput_window_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutorState {
    Registering,
    Idle,
    Busy,
    Suspended,
    Dead,
}

impl ExecutorState {
    /// Live executors hold a registry slot; dead ones are history.
    pub fn is_live(self) -> bool {
        !matches!(self, ExecutorState::Dead)
    }

    /// Only idle/busy executors receive new work.
    pub fn is_schedulable(self) -> bool {
        matches!(self, ExecutorState::Idle | ExecutorState::Busy)
    }
}

/// Dispatcher-side view of one agent.
#[derive(Debug, Clone)]
pub struct ExecutorRecord {
    pub executor_id: String,
    pub address: String,
    pub slots: u32,
    pub busy_slots: u32,
    pub state: ExecutorState,
    pub last_heartbeat_ms: u64,
    /// Time-ordered (timestamp_ms, task_id) failures within the sliding
    /// window; pruned on every append.
    pub failure_events: VecDeque<(u64, String)>,
    pub registered_at_ms: u64,
}

impl ExecutorRecord {
    fn free_slots(&self) -> u32 {
        self.slots - self.busy_slots
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TaskPhase {
    Queued,
    Running { executor_id: String },
    Finalized { status: TaskStatus },
}

#[derive(Debug)]
struct TaskEntry {
    descriptor: TaskDescriptor,
    client: ClientId,
    phase: TaskPhase,
    t_submitted: u64,
    t_dispatched: u64,
    retries_remaining: u32,
    dispatch_count: u32,
}

/// One structured log line per task state transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvent {
    pub task_id: String,
    pub event: &'static str,
    pub timestamp_ms: u64,
}

/// Side effects the network layer must carry out after a state call.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Dispatch {
        executor_id: String,
        dispatch: TaskDispatch,
    },
    Notify {
        client: ClientId,
        result: TaskResult,
    },
    Suspend {
        executor_id: String,
        reason: String,
    },
}

/// Counter snapshot; `submitted = queued + dispatched_running + completed_ok
/// + failed_app + failed_system` at every observable point.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatcherStats {
    pub submitted: u64,
    pub queued: u64,
    pub dispatched_running: u64,
    pub completed_ok: u64,
    pub failed_app: u64,
    pub failed_system: u64,
    pub rescheduled: u64,
    pub current_throughput_tasks_per_s: f64,
    pub registered_executors: u64,
    pub suspended_executors: u64,
    /// Total slots across schedulable executors; clients size their credit
    /// windows from this.
    pub advertised_slots: u64,
}

impl DispatcherStats {
    pub fn conservation_holds(&self) -> bool {
        self.submitted
            == self.queued
                + self.dispatched_running
                + self.completed_ok
                + self.failed_app
                + self.failed_system
    }

    pub fn to_reply(&self) -> StatsReply {
        StatsReply {
            submitted: self.submitted,
            queued: self.queued,
            dispatched_running: self.dispatched_running,
            completed_ok: self.completed_ok,
            failed_app: self.failed_app,
            failed_system: self.failed_system,
            rescheduled: self.rescheduled,
            current_throughput_tasks_per_s: self.current_throughput_tasks_per_s,
            registered_executors: self.registered_executors,
            suspended_executors: self.suspended_executors,
            advertised_slots: self.advertised_slots,
        }
    }
}

pub struct DispatcherState {
    config: DispatcherConfig,
    executors: HashMap<String, ExecutorRecord>,
    /// address -> live executor id, for re-registration detection.
    addr_index: HashMap<String, String>,
    tasks: HashMap<String, TaskEntry>,
    queue: VecDeque<String>,
    running_by_executor: HashMap<String, HashSet<String>>,
    next_executor_seq: u64,
    submitted: u64,
    completed_ok: u64,
    failed_app: u64,
    failed_system: u64,
    rescheduled: u64,
    completion_times: VecDeque<u64>,
    effects: Vec<Effect>,
    events: Vec<TaskEvent>,
}

impl DispatcherState {
    pub fn new(config: DispatcherConfig) -> Self {
        Self {
            config,
            executors: HashMap::new(),
            addr_index: HashMap::new(),
            tasks: HashMap::new(),
            queue: VecDeque::new(),
            running_by_executor: HashMap::new(),
            next_executor_seq: 0,
            submitted: 0,
            completed_ok: 0,
            failed_app: 0,
            failed_system: 0,
            rescheduled: 0,
            completion_times: VecDeque::new(),
            effects: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &DispatcherConfig {
        &self.config
    }

    /// Drain effects accumulated by state calls since the last drain.
    pub fn take_effects(&mut self) -> Vec<Effect> {
        std::mem::take(&mut self.effects)
    }

    /// Drain structured task events for the transition log.
    pub fn take_events(&mut self) -> Vec<TaskEvent> {
        std::mem::take(&mut self.events)
    }

    fn push_event(&mut self, task_id: &str, event: &'static str, now_ms: u64) {
        self.events.push(TaskEvent {
            task_id: task_id.to_string(),
            event,
            timestamp_ms: now_ms,
        });
    }

    pub fn executor(&self, executor_id: &str) -> Option<&ExecutorRecord> {
        self.executors.get(executor_id)
    }

    pub fn executors(&self) -> impl Iterator<Item = &ExecutorRecord> {
        self.executors.values()
    }

    /// Free slots across schedulable executors.
    pub fn free_slots(&self) -> u64 {
        self.executors
            .values()
            .filter(|e| e.state.is_schedulable())
            .map(|e| e.free_slots() as u64)
            .sum()
    }

    /// Register a new agent. A live record at the same address means the old
    /// agent dropped without us noticing; it is declared dead and its tasks
    /// rescheduled before the new record is created.
    pub fn register_executor(
        &mut self,
        hello: &Register,
        now_ms: u64,
    ) -> Result<RegisterAck, ErrorMsg> {
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(ErrorMsg {
                code: "version-mismatch".into(),
                message: format!(
                    "protocol version {} not supported (want {})",
                    hello.protocol_version, PROTOCOL_VERSION
                ),
            });
        }
        if hello.slots == 0 {
            return Err(ErrorMsg {
                code: "bad-register".into(),
                message: "slots must be >= 1".into(),
            });
        }
        if let Some(old_id) = self.addr_index.get(&hello.address).cloned() {
            log::warn!(
                "re-registration from {}: marking old executor {} dead",
                hello.address,
                old_id
            );
            self.mark_dead(&old_id, now_ms);
        }
        let seq = self.next_executor_seq;
        self.next_executor_seq += 1;
        let executor_id = format!("e-{seq:06}");
        let record = ExecutorRecord {
            executor_id: executor_id.clone(),
            address: hello.address.clone(),
            slots: hello.slots,
            busy_slots: 0,
            state: ExecutorState::Idle,
            last_heartbeat_ms: now_ms,
            failure_events: VecDeque::new(),
            registered_at_ms: now_ms,
        };
        self.addr_index
            .insert(hello.address.clone(), executor_id.clone());
        self.executors.insert(executor_id.clone(), record);
        Ok(RegisterAck {
            executor_id,
            heartbeat_interval_ms: self.config.heartbeat_interval_ms,
        })
    }

    pub fn heartbeat(&mut self, executor_id: &str, now_ms: u64) {
        if let Some(rec) = self.executors.get_mut(executor_id) {
            if rec.state.is_live() {
                rec.last_heartbeat_ms = now_ms;
            }
        }
    }

    /// Append a batch to the wait queue in order. Duplicate or invalid task
    /// ids are rejected individually; the rest are accepted.
    pub fn submit(&mut self, batch: &Submit, client: ClientId, now_ms: u64) -> SubmitAck {
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        for task in &batch.tasks {
            if self.tasks.contains_key(&task.task_id) {
                rejected.push(RejectedTask {
                    task_id: task.task_id.clone(),
                    reason: "duplicate-id".into(),
                });
                continue;
            }
            if let Err(reason) = task.validate() {
                rejected.push(RejectedTask {
                    task_id: task.task_id.clone(),
                    reason,
                });
                continue;
            }
            let retries = task.retries_remaining.min(self.config.max_retries);
            self.tasks.insert(
                task.task_id.clone(),
                TaskEntry {
                    descriptor: task.clone(),
                    client,
                    phase: TaskPhase::Queued,
                    t_submitted: now_ms,
                    t_dispatched: 0,
                    retries_remaining: retries,
                    dispatch_count: 0,
                },
            );
            self.queue.push_back(task.task_id.clone());
            self.submitted += 1;
            self.push_event(&task.task_id, "submitted", now_ms);
            accepted.push(task.task_id.clone());
        }
        SubmitAck { accepted, rejected }
    }

    /// Chooses the schedulable executor with a free slot that registered
    /// earliest (ties broken by executor id).
    fn pick_executor(&self) -> Option<String> {
        self.executors
            .values()
            .filter(|e| e.state.is_schedulable() && e.free_slots() > 0)
            .min_by(|a, b| {
                (a.registered_at_ms, &a.executor_id).cmp(&(b.registered_at_ms, &b.executor_id))
            })
            .map(|e| e.executor_id.clone())
    }

    /// Dequeue FIFO onto free slots. Returns the assignments made; the
    /// matching `Effect::Dispatch` entries carry the frames to send.
    pub fn schedule_step(&mut self, now_ms: u64) -> Vec<(String, String)> {
        let mut assignments = Vec::new();
        while !self.queue.is_empty() {
            let Some(executor_id) = self.pick_executor() else {
                break;
            };
            let task_id = self.queue.pop_front().expect("queue non-empty");
            let entry = self.tasks.get_mut(&task_id).expect("queued task exists");
            debug_assert_eq!(entry.phase, TaskPhase::Queued);
            entry.phase = TaskPhase::Running {
                executor_id: executor_id.clone(),
            };
            entry.t_dispatched = now_ms;
            entry.dispatch_count += 1;
            let dispatch = TaskDispatch {
                task: entry.descriptor.clone(),
                t_submitted: entry.t_submitted,
                t_dispatched: now_ms,
            };
            let rec = self.executors.get_mut(&executor_id).expect("picked record");
            rec.busy_slots += 1;
            rec.state = ExecutorState::Busy;
            self.running_by_executor
                .entry(executor_id.clone())
                .or_default()
                .insert(task_id.clone());
            self.push_event(&task_id, "dispatched", now_ms);
            self.effects.push(Effect::Dispatch {
                executor_id: executor_id.clone(),
                dispatch,
            });
            assignments.push((task_id, executor_id));
        }
        assignments
    }

    fn release_slot(&mut self, executor_id: &str, task_id: &str) {
        if let Some(set) = self.running_by_executor.get_mut(executor_id) {
            set.remove(task_id);
        }
        if let Some(rec) = self.executors.get_mut(executor_id) {
            if rec.state != ExecutorState::Dead {
                rec.busy_slots = rec.busy_slots.saturating_sub(1);
                if rec.state == ExecutorState::Busy && rec.busy_slots == 0 {
                    rec.state = ExecutorState::Idle;
                }
            }
        }
    }

    /// The TASK_DISPATCH frame could not be delivered: the executor is dead
    /// and the task goes back to the queue head (it never started, so no
    /// retry is consumed).
    pub fn dispatch_failed(&mut self, task_id: &str, executor_id: &str, now_ms: u64) {
        let matches_assignment = self
            .tasks
            .get(task_id)
            .map(|t| {
                t.phase
                    == TaskPhase::Running {
                        executor_id: executor_id.to_string(),
                    }
            })
            .unwrap_or(false);
        if !matches_assignment {
            return;
        }
        self.release_slot(executor_id, task_id);
        if let Some(entry) = self.tasks.get_mut(task_id) {
            entry.phase = TaskPhase::Queued;
            entry.dispatch_count -= 1;
        }
        self.queue.push_front(task_id.to_string());
        self.push_event(task_id, "requeued", now_ms);
        self.mark_dead(executor_id, now_ms);
    }

    /// Apply a result from an executor. Late or duplicate reports (task not
    /// currently assigned to that executor) change nothing.
    pub fn handle_result(&mut self, result: &TaskResult, now_ms: u64) {
        // Any frame from a live executor counts as a sign of life.
        self.heartbeat(&result.executor_id, now_ms);
        let Some(entry) = self.tasks.get(&result.task_id) else {
            log::debug!("result for unknown task {}; ignored", result.task_id);
            return;
        };
        let expected = TaskPhase::Running {
            executor_id: result.executor_id.clone(),
        };
        if entry.phase != expected {
            log::debug!(
                "stale result for task {} from {}; discarded",
                result.task_id,
                result.executor_id
            );
            return;
        }
        self.release_slot(&result.executor_id, &result.task_id);
        match result.status {
            TaskStatus::Success | TaskStatus::AppFailure => {
                self.finalize(&result.task_id.clone(), result.clone(), now_ms);
            }
            TaskStatus::SystemFailure | TaskStatus::Timeout | TaskStatus::Lost => {
                let entry = self.tasks.get(&result.task_id).expect("checked above");
                if entry.retries_remaining > 0 {
                    let executor_id = result.executor_id.clone();
                    let task_id = result.task_id.clone();
                    self.reschedule(&task_id, now_ms);
                    self.record_failure_event(&executor_id, &task_id, now_ms);
                    self.apply_suspend_policy(&executor_id, now_ms);
                } else {
                    self.finalize(&result.task_id.clone(), result.clone(), now_ms);
                }
            }
        }
    }

    fn reschedule(&mut self, task_id: &str, now_ms: u64) {
        let entry = self.tasks.get_mut(task_id).expect("task exists");
        entry.retries_remaining -= 1;
        entry.phase = TaskPhase::Queued;
        self.queue.push_back(task_id.to_string());
        self.rescheduled += 1;
        self.push_event(task_id, "rescheduled", now_ms);
    }

    fn finalize(&mut self, task_id: &str, result: TaskResult, now_ms: u64) {
        let entry = self.tasks.get_mut(task_id).expect("task exists");
        entry.phase = TaskPhase::Finalized {
            status: result.status,
        };
        let event = match result.status {
            TaskStatus::Success => {
                self.completed_ok += 1;
                "completed_ok"
            }
            TaskStatus::AppFailure => {
                self.failed_app += 1;
                "failed_app"
            }
            TaskStatus::SystemFailure | TaskStatus::Timeout | TaskStatus::Lost => {
                self.failed_system += 1;
                "failed_system"
            }
        };
        let client = self.tasks[task_id].client;
        self.completion_times.push_back(now_ms);
        self.push_event(task_id, event, now_ms);
        self.effects.push(Effect::Notify { client, result });
    }

    fn record_failure_event(&mut self, executor_id: &str, task_id: &str, now_ms: u64) {
        let window = self.config.suspend_window_ms;
        if let Some(rec) = self.executors.get_mut(executor_id) {
            if rec.state.is_live() {
                rec.failure_events
                    .push_back((now_ms, task_id.to_string()));
                while let Some(&(ts, _)) = rec.failure_events.front() {
                    if ts + window < now_ms {
                        rec.failure_events.pop_front();
                    } else {
                        break;
                    }
                }
            }
        }
    }

    /// Suspend an executor once it accumulates too many failures inside the
    /// trailing window. Suspended executors get no new work and are never
    /// auto-resumed; the operator restarts the agent, which re-registers.
    pub fn apply_suspend_policy(&mut self, executor_id: &str, now_ms: u64) -> bool {
        let threshold = self.config.suspend_failure_threshold;
        let window = self.config.suspend_window_ms;
        let Some(rec) = self.executors.get_mut(executor_id) else {
            return false;
        };
        if !rec.state.is_schedulable() {
            return false;
        }
        let in_window = rec
            .failure_events
            .iter()
            .filter(|(ts, _)| ts + window >= now_ms)
            .count();
        if in_window >= threshold {
            rec.state = ExecutorState::Suspended;
            let reason = format!("{in_window} task failures within {window} ms");
            log::warn!("suspending executor {executor_id}: {reason}");
            self.effects.push(Effect::Suspend {
                executor_id: executor_id.to_string(),
                reason,
            });
            true
        } else {
            false
        }
    }

    /// Declare executors dead after three missed heartbeats; their in-flight
    /// tasks become lost and follow the reschedule path.
    pub fn check_liveness(&mut self, now_ms: u64) -> Vec<String> {
        let deadline = self.config.heartbeat_interval_ms * self.config.missed_heartbeats_dead as u64;
        let stale: Vec<String> = self
            .executors
            .values()
            .filter(|e| e.state.is_live() && now_ms.saturating_sub(e.last_heartbeat_ms) > deadline)
            .map(|e| e.executor_id.clone())
            .collect();
        for id in &stale {
            log::warn!("executor {id} missed heartbeats; marking dead");
            self.mark_dead(id, now_ms);
        }
        stale
    }

    /// Communication failure or missed heartbeats: drop the record and
    /// reschedule everything it was running.
    pub fn mark_dead(&mut self, executor_id: &str, now_ms: u64) {
        let Some(rec) = self.executors.get_mut(executor_id) else {
            return;
        };
        if rec.state == ExecutorState::Dead {
            return;
        }
        rec.state = ExecutorState::Dead;
        rec.busy_slots = 0;
        let address = rec.address.clone();
        if self.addr_index.get(&address).map(String::as_str) == Some(executor_id) {
            self.addr_index.remove(&address);
        }
        let in_flight: Vec<String> = self
            .running_by_executor
            .remove(executor_id)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        for task_id in in_flight {
            self.push_event(&task_id, "lost", now_ms);
            let entry = self.tasks.get(&task_id).expect("running task exists");
            if entry.retries_remaining > 0 {
                self.reschedule(&task_id, now_ms);
            } else {
                let result = TaskResult {
                    task_id: task_id.clone(),
                    exit_code: -1,
                    status: TaskStatus::Lost,
                    executor_id: executor_id.to_string(),
                    t_submitted: entry.t_submitted,
                    t_dispatched: entry.t_dispatched,
                    t_started: entry.t_dispatched,
                    t_finished: now_ms,
                    stdout_ref: None,
                    stderr_ref: None,
                };
                self.finalize(&task_id, result, now_ms);
            }
        }
    }

    /// Resolve the target list of a SHUTDOWN request; empty means all live
    /// executors.
    pub fn shutdown_targets(&self, executor_ids: &[String]) -> Vec<String> {
        if executor_ids.is_empty() {
            self.executors
                .values()
                .filter(|e| e.state.is_live())
                .map(|e| e.executor_id.clone())
                .collect()
        } else {
            executor_ids
                .iter()
                .filter(|id| {
                    self.executors
                        .get(*id)
                        .map(|e| e.state.is_live())
                        .unwrap_or(false)
                })
                .cloned()
                .collect()
        }
    }

    /// Consistent counter snapshot.
    pub fn stats(&mut self, now_ms: u64) -> DispatcherStats {
        let window = self.config.throughput_window_ms;
        while let Some(&ts) = self.completion_times.front() {
            if ts + window < now_ms {
                self.completion_times.pop_front();
            } else {
                break;
            }
        }
        let throughput = self.completion_times.len() as f64 / (window as f64 / 1000.0);
        let running: u64 = self
            .running_by_executor
            .values()
            .map(|s| s.len() as u64)
            .sum();
        let stats = DispatcherStats {
            submitted: self.submitted,
            queued: self.queue.len() as u64,
            dispatched_running: running,
            completed_ok: self.completed_ok,
            failed_app: self.failed_app,
            failed_system: self.failed_system,
            rescheduled: self.rescheduled,
            current_throughput_tasks_per_s: throughput,
            registered_executors: self
                .executors
                .values()
                .filter(|e| e.state.is_live())
                .count() as u64,
            suspended_executors: self
                .executors
                .values()
                .filter(|e| e.state == ExecutorState::Suspended)
                .count() as u64,
            advertised_slots: self
                .executors
                .values()
                .filter(|e| e.state.is_schedulable())
                .map(|e| e.slots as u64)
                .sum(),
        };
        debug_assert!(stats.conservation_holds(), "conservation violated: {stats:?}");
        stats
    }
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    #[derive(Debug, Clone)]
    enum Op {
        Submit(u8),
        Schedule,
        Finish { running_idx: u8, status_pick: u8 },
        KillExecutor(u8),
        Register(u8),
    }

    fn op_strategy() -> impl Strategy<Value = Op> {
        prop_oneof![
            (1u8..6).prop_map(Op::Submit),
            Just(Op::Schedule),
            (any::<u8>(), 0u8..4).prop_map(|(running_idx, status_pick)| Op::Finish {
                running_idx,
                status_pick
            }),
            any::<u8>().prop_map(Op::KillExecutor),
            (1u8..4).prop_map(Op::Register),
        ]
    }

    proptest! {
        /// Random op scripts preserve conservation, capacity, FIFO order
        /// among never-rescheduled tasks, per-task retry bounds, and
        /// exactly-once finalization.
        #[test]
        fn invariants_hold_under_random_scripts(ops in prop::collection::vec(op_strategy(), 1..120)) {
            let mut s = DispatcherState::new(DispatcherConfig::default());
            let mut now = 0u64;
            let mut next_task = 0usize;
            let mut next_addr = 0usize;
            let mut running: Vec<(String, String)> = Vec::new();
            let mut submit_order: Vec<String> = Vec::new();
            let mut dispatch_log: Vec<String> = Vec::new();
            let mut rescheduled_ever: std::collections::HashSet<String> = Default::default();
            let mut dispatch_counts: std::collections::HashMap<String, u32> = Default::default();
            let mut finalized: std::collections::HashSet<String> = Default::default();

            // Start with one executor so schedules can happen.
            s.register_executor(&Register { protocol_version: PROTOCOL_VERSION, slots: 2, address: "seed".into() }, now).unwrap();

            for op in ops {
                now += 7;
                match op {
                    Op::Submit(n) => {
                        let tasks: Vec<TaskDescriptor> = (0..n).map(|_| {
                            let id = format!("p{next_task}");
                            next_task += 1;
                            submit_order.push(id.clone());
                            let mut t = TaskDescriptor::new(id, "/bin/true");
                            t.retries_remaining = 1;
                            t
                        }).collect();
                        s.submit(&Submit { tasks }, 1, now);
                    }
                    Op::Schedule => {
                        for (task_id, executor_id) in s.schedule_step(now) {
                            *dispatch_counts.entry(task_id.clone()).or_default() += 1;
                            dispatch_log.push(task_id.clone());
                            running.push((task_id, executor_id));
                        }
                    }
                    Op::Finish { running_idx, status_pick } => {
                        if running.is_empty() { continue; }
                        let (task_id, executor_id) = running.remove(running_idx as usize % running.len());
                        let status = match status_pick {
                            0 => TaskStatus::Success,
                            1 => TaskStatus::AppFailure,
                            2 => TaskStatus::SystemFailure,
                            _ => TaskStatus::Timeout,
                        };
                        let r = TaskResult {
                            task_id: task_id.clone(),
                            exit_code: if status == TaskStatus::Success { 0 } else { 1 },
                            status,
                            executor_id,
                            t_submitted: 0, t_dispatched: 0, t_started: now, t_finished: now,
                            stdout_ref: None, stderr_ref: None,
                        };
                        s.handle_result(&r, now);
                    }
                    Op::KillExecutor(pick) => {
                        let live: Vec<String> = s.executors()
                            .filter(|e| e.state.is_live())
                            .map(|e| e.executor_id.clone())
                            .collect();
                        if live.is_empty() { continue; }
                        let victim = live[pick as usize % live.len()].clone();
                        s.mark_dead(&victim, now);
                        running.retain(|(_, e)| *e != victim);
                    }
                    Op::Register(slots) => {
                        let addr = format!("addr{next_addr}");
                        next_addr += 1;
                        s.register_executor(&Register { protocol_version: PROTOCOL_VERSION, slots: slots as u32, address: addr }, now).unwrap();
                    }
                }

                // Track reschedules and finalizations from the event stream.
                for ev in s.take_events() {
                    match ev.event {
                        "rescheduled" => { rescheduled_ever.insert(ev.task_id); }
                        "completed_ok" | "failed_app" | "failed_system" => {
                            prop_assert!(finalized.insert(ev.task_id.clone()),
                                "task {} finalized twice", ev.task_id);
                        }
                        _ => {}
                    }
                }
                s.take_effects();

                // Conservation and capacity at every observable point.
                let stats = s.stats(now);
                prop_assert!(stats.conservation_holds(), "conservation: {stats:?}");
                let mut busy_total = 0u64;
                for e in s.executors() {
                    prop_assert!(e.busy_slots <= e.slots);
                    if e.state.is_live() { busy_total += e.busy_slots as u64; }
                }
                prop_assert_eq!(stats.dispatched_running, busy_total);
            }

            // Retry bound: each task dispatched at most 1 + retries (1 here).
            for (task, count) in &dispatch_counts {
                prop_assert!(*count <= 2, "task {task} dispatched {count} times");
            }

            // FIFO: among never-rescheduled tasks, dispatch order respects
            // submission order.
            let pos: std::collections::HashMap<&String, usize> =
                submit_order.iter().enumerate().map(|(i, id)| (id, i)).collect();
            let mut last = None;
            for task in dispatch_log.iter().filter(|t| !rescheduled_ever.contains(*t)) {
                let p = pos[task];
                if let Some(prev) = last {
                    prop_assert!(p > prev, "dispatch order violates FIFO");
                }
                last = Some(p);
            }
        }
    }
}
