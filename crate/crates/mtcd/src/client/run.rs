//! Streaming task submission with credit-based flow control.
//!
//! Each dispatcher gets a credit window of `advertised_slots x multiplier`;
//! a task is sent to the reachable dispatcher with the most free credit
//! (round-robin on ties) and submission blocks when every window is full,
//! so client memory stays O(credits) no matter how long the workload is.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::Write as IoWrite;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::clock::monotonic_ms;
use crate::protocol::{
    decode, encode, Message, StatsRequest, Submit, TaskDescriptor, TaskResult, TaskStatus,
};

use super::workload::Workload;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no dispatcher reachable (tried {0})")]
    NoDispatcherReachable(usize),
    #[error("all dispatchers lost after {submitted} of {total} tasks submitted")]
    PartialSubmission { submitted: usize, total: usize },
    #[error("no advertised capacity appeared within {0:?}")]
    NoCapacity(Duration),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// Credit window per dispatcher = advertised_slots x this multiplier.
    pub credit_multiplier: u64,
    /// How long to wait for nonzero advertised capacity before failing.
    pub capacity_wait: Duration,
    /// Per-task event log (CSV) destination.
    pub events_out: Option<PathBuf>,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            credit_multiplier: 3,
            capacity_wait: Duration::from_secs(30),
            events_out: None,
        }
    }
}

/// Client-side view of one dispatcher connection.
#[derive(Debug, Clone)]
pub struct DispatcherHandle {
    pub address: String,
    pub advertised_slots: u64,
    pub outstanding: u64,
    pub credit_limit: u64,
    /// Tasks this dispatcher received over the whole run.
    pub submitted_count: u64,
    /// Highest `outstanding` observed, sampled at every send.
    pub max_outstanding: u64,
}

struct DispState {
    handle: DispatcherHandle,
    alive: bool,
    writer: Option<Arc<Mutex<TcpStream>>>,
}

struct RunState {
    pending: VecDeque<TaskDescriptor>,
    dispatchers: Vec<DispState>,
    results: HashMap<String, TaskResult>,
    submitted_at: HashMap<String, u64>,
    owner: HashMap<String, usize>,
    /// Descriptors in flight, needed again if a dispatcher dies mid-run.
    inflight_descriptors: HashMap<String, TaskDescriptor>,
    rejected: Vec<(String, String)>,
    credit_multiplier: u64,
    rr_cursor: usize,
    submission_finished: bool,
    fatal: Option<String>,
    closing: bool,
}

impl RunState {
    fn finished_count(&self) -> usize {
        self.results.len()
    }

    fn requeue_dispatcher_tasks(&mut self, idx: usize) {
        let ids: Vec<String> = self
            .owner
            .iter()
            .filter(|(_, d)| **d == idx)
            .map(|(t, _)| t.clone())
            .collect();
        // Keep original workload order when pushing back to the front.
        let mut tasks: Vec<TaskDescriptor> = Vec::new();
        for id in &ids {
            self.owner.remove(id);
            if let Some(pos) = self.inflight_descriptors.remove(id) {
                tasks.push(pos);
            }
        }
        tasks.sort_by_key(|t| self.submitted_at.get(&t.task_id).copied().unwrap_or(0));
        for t in tasks.into_iter().rev() {
            self.pending.push_front(t);
        }
        self.dispatchers[idx].handle.outstanding = 0;
    }

    fn total_outstanding(&self) -> u64 {
        self.dispatchers.iter().map(|d| d.handle.outstanding).sum()
    }
}

impl RunState {
    fn new(tasks: VecDeque<TaskDescriptor>, dispatchers: Vec<DispState>, credit_multiplier: u64) -> Self {
        Self {
            pending: tasks,
            dispatchers,
            results: HashMap::new(),
            submitted_at: HashMap::new(),
            owner: HashMap::new(),
            inflight_descriptors: HashMap::new(),
            rejected: Vec::new(),
            credit_multiplier,
            rr_cursor: 0,
            submission_finished: false,
            fatal: None,
            closing: false,
        }
    }
}

struct RunShared {
    state: Mutex<RunState>,
    progress: Condvar,
}

/// Handle on a streaming run; results accumulate until `wait_all`.
pub struct RunHandle {
    shared: Arc<RunShared>,
    workload_order: Vec<String>,
    submit_thread: Option<std::thread::JoinHandle<()>>,
    reader_threads: Vec<std::thread::JoinHandle<()>>,
    options: ClientOptions,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub total: usize,
    /// Tasks finalized by a dispatcher (any terminal status).
    pub completed: u64,
    pub status_counts: BTreeMap<String, u64>,
    pub rejected: u64,
    /// Stragglers given up on at the client's wait timeout.
    pub lost_to_client: u64,
    pub makespan_s: f64,
    pub throughput_tasks_per_s: f64,
    pub dispatchers: Vec<DispatcherHandle>,
}

/// Connect to the dispatchers, then stream the workload out from a
/// background thread under per-dispatcher credit windows.
pub fn submit_all(
    workload: &Workload,
    dispatcher_addrs: &[String],
    options: ClientOptions,
) -> Result<RunHandle, ClientError> {
    let mut dispatchers = Vec::new();
    let mut conns: Vec<Option<TcpStream>> = Vec::new();
    for addr in dispatcher_addrs {
        match connect_and_probe(addr, options.credit_multiplier) {
            Ok((stream, slots)) => {
                dispatchers.push(DispState {
                    handle: DispatcherHandle {
                        address: addr.clone(),
                        advertised_slots: slots,
                        outstanding: 0,
                        credit_limit: slots * options.credit_multiplier,
                        submitted_count: 0,
                        max_outstanding: 0,
                    },
                    alive: true,
                    writer: Some(Arc::new(Mutex::new(
                        stream.try_clone().map_err(ClientError::Io)?,
                    ))),
                });
                conns.push(Some(stream));
            }
            Err(e) => {
                log::warn!("dispatcher {addr} unreachable: {e}");
                dispatchers.push(DispState {
                    handle: DispatcherHandle {
                        address: addr.clone(),
                        advertised_slots: 0,
                        outstanding: 0,
                        credit_limit: 0,
                        submitted_count: 0,
                        max_outstanding: 0,
                    },
                    alive: false,
                    writer: None,
                });
                conns.push(None);
            }
        }
    }
    if dispatchers.iter().all(|d| !d.alive) {
        return Err(ClientError::NoDispatcherReachable(dispatcher_addrs.len()));
    }

    let workload_order: Vec<String> = workload.tasks.iter().map(|t| t.task_id.clone()).collect();
    let shared = Arc::new(RunShared {
        state: Mutex::new(RunState::new(
            workload.tasks.iter().cloned().collect(),
            dispatchers,
            options.credit_multiplier,
        )),
        progress: Condvar::new(),
    });

    let mut reader_threads = Vec::new();
    for (idx, conn) in conns.into_iter().enumerate() {
        let Some(stream) = conn else { continue };
        let shared = Arc::clone(&shared);
        reader_threads.push(
            std::thread::Builder::new()
                .name(format!("client-reader-{idx}"))
                .spawn(move || reader_loop(stream, idx, shared))
                .map_err(ClientError::Io)?,
        );
    }

    let submit_shared = Arc::clone(&shared);
    let submit_options = options.clone();
    let total = workload.tasks.len();
    let submit_thread = std::thread::Builder::new()
        .name("client-submit".into())
        .spawn(move || submission_loop(submit_shared, submit_options, total))
        .map_err(ClientError::Io)?;

    Ok(RunHandle {
        shared,
        workload_order,
        submit_thread: Some(submit_thread),
        reader_threads,
        options,
    })
}

fn connect_and_probe(addr: &str, _multiplier: u64) -> Result<(TcpStream, u64), std::io::Error> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let mut read_half = stream.try_clone()?;
    let frame = encode(&Message::StatsRequest(StatsRequest {}))
        .expect("stats request encodes");
    {
        let mut w = &stream;
        w.write_all(&frame)?;
    }
    match decode(&mut read_half) {
        Ok(Message::StatsReply(reply)) => Ok((stream, reply.advertised_slots)),
        Ok(other) => Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("expected STATS_REPLY, got {}", other.kind_name()),
        )),
        Err(e) => Err(std::io::Error::new(std::io::ErrorKind::ConnectionAborted, e.to_string())),
    }
}

fn reader_loop(mut stream: TcpStream, idx: usize, shared: Arc<RunShared>) {
    loop {
        match decode(&mut stream) {
            Ok(Message::ResultNotify(notify)) => {
                let result = notify.result;
                let mut st = shared.state.lock().unwrap_or_else(|e| e.into_inner());
                if st.owner.remove(&result.task_id).is_some() {
                    st.inflight_descriptors.remove(&result.task_id);
                    st.dispatchers[idx].handle.outstanding =
                        st.dispatchers[idx].handle.outstanding.saturating_sub(1);
                }
                st.results.entry(result.task_id.clone()).or_insert(result);
                shared.progress.notify_all();
            }
            Ok(Message::SubmitAck(ack)) => {
                if ack.rejected.is_empty() {
                    continue;
                }
                let mut st = shared.state.lock().unwrap_or_else(|e| e.into_inner());
                for rej in ack.rejected {
                    log::warn!("task {} rejected: {}", rej.task_id, rej.reason);
                    if st.owner.remove(&rej.task_id).is_some() {
                        st.inflight_descriptors.remove(&rej.task_id);
                        st.dispatchers[idx].handle.outstanding =
                            st.dispatchers[idx].handle.outstanding.saturating_sub(1);
                    }
                    let stamp = st.submitted_at.get(&rej.task_id).copied().unwrap_or(0);
                    st.results
                        .entry(rej.task_id.clone())
                        .or_insert_with(|| synthesized_lost(&rej.task_id, stamp));
                    st.rejected.push((rej.task_id, rej.reason));
                }
                shared.progress.notify_all();
            }
            Ok(Message::StatsReply(reply)) => {
                let mut st = shared.state.lock().unwrap_or_else(|e| e.into_inner());
                // A dispatcher that advertised zero at connect time may have
                // gained executors since; pick up its real capacity.
                if st.dispatchers[idx].handle.advertised_slots == 0 {
                    let multiplier = st.credit_multiplier;
                    st.dispatchers[idx].handle.advertised_slots = reply.advertised_slots;
                    st.dispatchers[idx].handle.credit_limit = reply.advertised_slots * multiplier;
                }
                shared.progress.notify_all();
            }
            Ok(_) => {}
            Err(_) => break,
        }
    }
    let mut st = shared.state.lock().unwrap_or_else(|e| e.into_inner());
    if !st.closing {
        log::warn!("dispatcher {idx} connection lost; rerouting its tasks");
    }
    st.dispatchers[idx].alive = false;
    st.dispatchers[idx].writer = None;
    st.requeue_dispatcher_tasks(idx);
    shared.progress.notify_all();
}

fn synthesized_lost(task_id: &str, stamp: u64) -> TaskResult {
    TaskResult {
        task_id: task_id.to_string(),
        exit_code: -1,
        status: TaskStatus::Lost,
        executor_id: String::new(),
        t_submitted: stamp,
        t_dispatched: stamp,
        t_started: stamp,
        t_finished: stamp,
        stdout_ref: None,
        stderr_ref: None,
    }
}

fn submission_loop(shared: Arc<RunShared>, options: ClientOptions, total: usize) {
    let capacity_deadline = monotonic_ms() + options.capacity_wait.as_millis() as u64;
    loop {
        let mut st = shared.state.lock().unwrap_or_else(|e| e.into_inner());
        if st.fatal.is_some() || st.closing {
            return;
        }
        if st.pending.is_empty() {
            st.submission_finished = true;
            shared.progress.notify_all();
            return;
        }
        if st.dispatchers.iter().all(|d| !d.alive) {
            let submitted = total - st.pending.len();
            st.fatal = Some(format!(
                "all dispatchers lost; {submitted}/{total} tasks submitted"
            ));
            shared.progress.notify_all();
            return;
        }

        // Pick the reachable dispatcher with the most free credit;
        // round-robin cursor breaks ties.
        let n = st.dispatchers.len();
        let avail = |d: &DispState| -> u64 {
            if d.alive && d.writer.is_some() {
                d.handle.credit_limit.saturating_sub(d.handle.outstanding)
            } else {
                0
            }
        };
        let max_avail = st.dispatchers.iter().map(avail).max().unwrap_or(0);
        if max_avail == 0 {
            let no_capacity_anywhere =
                st.total_outstanding() == 0 && st.dispatchers.iter().all(|d| d.handle.credit_limit == 0 || !d.alive);
            if no_capacity_anywhere {
                if monotonic_ms() > capacity_deadline {
                    st.fatal = Some("no advertised capacity".into());
                    shared.progress.notify_all();
                    return;
                }
                // Ask again; executors may still be registering.
                let writers: Vec<Arc<Mutex<TcpStream>>> = st
                    .dispatchers
                    .iter()
                    .filter(|d| d.alive)
                    .filter_map(|d| d.writer.clone())
                    .collect();
                drop(st);
                let frame =
                    encode(&Message::StatsRequest(StatsRequest {})).expect("encodes");
                for w in writers {
                    let mut s = w.lock().unwrap_or_else(|e| e.into_inner());
                    let _ = s.write_all(&frame);
                }
                std::thread::sleep(Duration::from_millis(50));
                continue;
            }
            // Wait for a RESULT_NOTIFY to free credit.
            let (guard, _) = shared
                .progress
                .wait_timeout(st, Duration::from_millis(100))
                .unwrap_or_else(|e| e.into_inner());
            drop(guard);
            continue;
        }
        let start = st.rr_cursor;
        let pick = (0..n)
            .map(|off| (start + off) % n)
            .find(|&i| avail(&st.dispatchers[i]) == max_avail)
            .expect("max exists");
        st.rr_cursor = pick + 1;

        let task = st.pending.pop_front().expect("pending non-empty");
        let task_id = task.task_id.clone();
        let now = monotonic_ms();
        st.submitted_at.insert(task_id.clone(), now);
        st.owner.insert(task_id.clone(), pick);
        st.inflight_descriptors.insert(task_id.clone(), task.clone());
        let d = &mut st.dispatchers[pick];
        d.handle.outstanding += 1;
        d.handle.submitted_count += 1;
        d.handle.max_outstanding = d.handle.max_outstanding.max(d.handle.outstanding);
        // Flow-control invariant, sampled at every send.
        debug_assert!(d.handle.outstanding <= d.handle.credit_limit);
        let writer = d.writer.clone().expect("alive dispatcher has writer");
        drop(st);

        let frame = encode(&Message::Submit(Submit { tasks: vec![task] })).expect("encodes");
        let sent = {
            let mut s = writer.lock().unwrap_or_else(|e| e.into_inner());
            s.write_all(&frame).is_ok()
        };
        if !sent {
            log::warn!("send of {task_id} failed; rerouting dispatcher {pick}'s tasks");
            let mut st = shared.state.lock().unwrap_or_else(|e| e.into_inner());
            st.dispatchers[pick].alive = false;
            st.dispatchers[pick].writer = None;
            st.requeue_dispatcher_tasks(pick);
            shared.progress.notify_all();
        }
    }
}

impl RunHandle {
    /// Block until every task is finalized or `timeout` passes; stragglers
    /// are marked lost-to-client. Returns results in workload order plus a
    /// summary, and writes the per-task event log if configured.
    pub fn wait_all(mut self, timeout: Duration) -> Result<(Vec<TaskResult>, RunSummary), ClientError> {
        let deadline = monotonic_ms() + timeout.as_millis() as u64;
        let total = self.workload_order.len();
        {
            let mut st = self.shared.state.lock().unwrap_or_else(|e| e.into_inner());
            loop {
                if st.finished_count() >= total {
                    break;
                }
                if let Some(f) = &st.fatal {
                    let msg = f.clone();
                    drop(st);
                    self.teardown();
                    let submitted = total
                        - self
                            .shared
                            .state
                            .lock()
                            .unwrap_or_else(|e| e.into_inner())
                            .pending
                            .len();
                    log::error!("run failed: {msg}");
                    return Err(ClientError::PartialSubmission { submitted, total });
                }
                if monotonic_ms() >= deadline {
                    break;
                }
                let (guard, _) = self
                    .shared
                    .progress
                    .wait_timeout(st, Duration::from_millis(50))
                    .unwrap_or_else(|e| e.into_inner());
                st = guard;
            }
        }
        self.teardown();

        let mut st = self.shared.state.lock().unwrap_or_else(|e| e.into_inner());
        let mut lost_to_client = 0u64;
        for id in &self.workload_order {
            if !st.results.contains_key(id) {
                lost_to_client += 1;
                let stamp = st.submitted_at.get(id).copied().unwrap_or(0);
                let r = synthesized_lost(id, stamp);
                st.results.insert(id.clone(), r);
            }
        }

        let results: Vec<TaskResult> = self
            .workload_order
            .iter()
            .map(|id| st.results[id].clone())
            .collect();

        let mut status_counts: BTreeMap<String, u64> = BTreeMap::new();
        for r in &results {
            *status_counts.entry(r.status.to_string()).or_default() += 1;
        }
        let completed = (results.len() as u64) - lost_to_client;
        let first_dispatch = results
            .iter()
            .filter(|r| r.t_dispatched > 0)
            .map(|r| r.t_dispatched)
            .min();
        let last_finish = results
            .iter()
            .filter(|r| r.t_finished > 0)
            .map(|r| r.t_finished)
            .max();
        let makespan_s = match (first_dispatch, last_finish) {
            (Some(a), Some(b)) if b > a => (b - a) as f64 / 1000.0,
            _ => 0.0,
        };
        let throughput = if makespan_s > 0.0 {
            completed as f64 / makespan_s
        } else {
            0.0
        };
        let summary = RunSummary {
            total,
            completed,
            status_counts,
            rejected: st.rejected.len() as u64,
            lost_to_client,
            makespan_s,
            throughput_tasks_per_s: throughput,
            dispatchers: st.dispatchers.iter().map(|d| d.handle.clone()).collect(),
        };

        if let Some(path) = &self.options.events_out {
            let submitted_at = st.submitted_at.clone();
            drop(st);
            write_event_log(path, &self.workload_order, &results, &submitted_at)?;
        }

        Ok((results, summary))
    }

    fn teardown(&mut self) {
        {
            let mut st = self.shared.state.lock().unwrap_or_else(|e| e.into_inner());
            st.closing = true;
            for d in &mut st.dispatchers {
                if let Some(w) = &d.writer {
                    let s = w.lock().unwrap_or_else(|e| e.into_inner());
                    let _ = s.shutdown(std::net::Shutdown::Both);
                }
                d.alive = false;
                d.writer = None;
            }
            shared_notify(&self.shared);
        }
        if let Some(t) = self.submit_thread.take() {
            let _ = t.join();
        }
        for t in self.reader_threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn shared_notify(shared: &RunShared) {
    shared.progress.notify_all();
}

impl Drop for RunHandle {
    fn drop(&mut self) {
        self.teardown();
    }
}

/// CSV with columns `task_id,event,timestamp_ms` and events
/// submitted/dispatched/started/finished, enough to rebuild utilization
/// timelines.
fn write_event_log(
    path: &std::path::Path,
    order: &[String],
    results: &[TaskResult],
    submitted_at: &HashMap<String, u64>,
) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "task_id,event,timestamp_ms")?;
    let by_id: HashMap<&str, &TaskResult> =
        results.iter().map(|r| (r.task_id.as_str(), r)).collect();
    for id in order {
        let Some(r) = by_id.get(id.as_str()) else { continue };
        if let Some(sub) = submitted_at.get(id) {
            writeln!(f, "{id},submitted,{sub}")?;
        }
        // Synthesized client-side losses carry no executor timestamps.
        if r.executor_id.is_empty() {
            continue;
        }
        if r.t_dispatched > 0 {
            writeln!(f, "{id},dispatched,{}", r.t_dispatched)?;
        }
        if r.t_started > 0 {
            writeln!(f, "{id},started,{}", r.t_started)?;
        }
        if r.t_finished > 0 {
            writeln!(f, "{id},finished,{}", r.t_finished)?;
        }
    }
    f.flush()
}
