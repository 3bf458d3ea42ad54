//! TCP front end for the dispatcher state machine.
//!
//! All state mutations go through one lock; connection I/O runs on one
//! reader thread per connection plus a periodic tick thread for liveness
//! checks. Frames are written outside the state lock, and send failures
//! feed back into the state machine (dead executor, task back to the queue
//! head).

use std::collections::HashMap;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::clock::monotonic_ms;
use crate::protocol::{decode, encode, ErrorMsg, Message, ResultNotify, Suspend as SuspendMsg};

use super::state::{ClientId, DispatcherConfig, DispatcherState, DispatcherStats, Effect, TaskEvent};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub bind: String,
    pub dispatcher: DispatcherConfig,
    /// Directory for the structured task event log (`events.csv`).
    pub log_dir: Option<PathBuf>,
    /// Cadence of the liveness/scheduling safety tick.
    pub tick_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            dispatcher: DispatcherConfig::default(),
            log_dir: None,
            tick_ms: 100,
        }
    }
}

type SharedWriter = Arc<Mutex<TcpStream>>;

struct Inner {
    state: DispatcherState,
    executor_writers: HashMap<String, SharedWriter>,
    client_writers: HashMap<ClientId, SharedWriter>,
}

struct Shared {
    inner: Mutex<Inner>,
    shutting_down: AtomicBool,
    next_client_id: AtomicU64,
    event_log: Option<Mutex<std::io::BufWriter<std::fs::File>>>,
}

/// A frame resolved out of the state lock, ready to send.
enum OutFrame {
    Dispatch {
        executor_id: String,
        task_id: String,
        writer: Option<SharedWriter>,
        frame: Vec<u8>,
    },
    ToExecutor {
        executor_id: String,
        writer: Option<SharedWriter>,
        frame: Vec<u8>,
    },
    ToClient {
        client: ClientId,
        writer: Option<SharedWriter>,
        frame: Vec<u8>,
    },
}

impl Shared {
    fn log_events(&self, events: &[TaskEvent]) {
        let Some(sink) = &self.event_log else {
            return;
        };
        let mut sink = sink.lock().unwrap_or_else(|e| e.into_inner());
        for ev in events {
            let _ = writeln!(sink, "{},{},{}", ev.task_id, ev.event, ev.timestamp_ms);
        }
        let _ = sink.flush();
    }

    fn resolve_effects(&self, inner: &mut Inner, effects: Vec<Effect>) -> Vec<OutFrame> {
        let mut out = Vec::with_capacity(effects.len());
        for effect in effects {
            match effect {
                Effect::Dispatch {
                    executor_id,
                    dispatch,
                } => {
                    let task_id = dispatch.task.task_id.clone();
                    let frame = encode(&Message::TaskDispatch(dispatch))
                        .expect("dispatch frame encodes");
                    let writer = inner.executor_writers.get(&executor_id).cloned();
                    out.push(OutFrame::Dispatch {
                        executor_id,
                        task_id,
                        writer,
                        frame,
                    });
                }
                Effect::Notify { client, result } => {
                    let frame = encode(&Message::ResultNotify(ResultNotify { result }))
                        .expect("notify frame encodes");
                    let writer = inner.client_writers.get(&client).cloned();
                    out.push(OutFrame::ToClient {
                        client,
                        writer,
                        frame,
                    });
                }
                Effect::Suspend {
                    executor_id,
                    reason,
                } => {
                    let frame = encode(&Message::Suspend(SuspendMsg {
                        executor_id: executor_id.clone(),
                        reason,
                    }))
                    .expect("suspend frame encodes");
                    let writer = inner.executor_writers.get(&executor_id).cloned();
                    out.push(OutFrame::ToExecutor {
                        executor_id,
                        writer,
                        frame,
                    });
                }
            }
        }
        out
    }

    /// Run `mutate` against the state, then keep scheduling and sending
    /// until the system settles. Send failures are folded back into the
    /// state machine and the loop continues.
    fn with_state_and_flush<F>(&self, mutate: F)
    where
        F: FnOnce(&mut DispatcherState, u64),
    {
        let mut first: Option<F> = Some(mutate);
        loop {
            let now = monotonic_ms();
            let frames = {
                let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
                let inner = &mut *guard;
                if let Some(f) = first.take() {
                    f(&mut inner.state, now);
                }
                inner.state.schedule_step(now);
                let effects = inner.state.take_effects();
                let events = inner.state.take_events();
                let frames = self.resolve_effects(inner, effects);
                drop(guard);
                self.log_events(&events);
                frames
            };
            if frames.is_empty() {
                return;
            }

            let mut failed_dispatches: Vec<(String, String)> = Vec::new();
            let mut dead_executors: Vec<String> = Vec::new();
            let mut dead_clients: Vec<ClientId> = Vec::new();
            for out in frames {
                match out {
                    OutFrame::Dispatch {
                        executor_id,
                        task_id,
                        writer,
                        frame,
                    } => {
                        if !send_frame(&writer, &frame) {
                            failed_dispatches.push((task_id, executor_id));
                        }
                    }
                    OutFrame::ToExecutor {
                        executor_id,
                        writer,
                        frame,
                    } => {
                        if !send_frame(&writer, &frame) {
                            dead_executors.push(executor_id);
                        }
                    }
                    OutFrame::ToClient {
                        client,
                        writer,
                        frame,
                    } => {
                        if !send_frame(&writer, &frame) {
                            log::warn!("client {client} unreachable; dropping notification");
                            dead_clients.push(client);
                        }
                    }
                }
            }

            if failed_dispatches.is_empty() && dead_executors.is_empty() && dead_clients.is_empty()
            {
                return;
            }
            let now = monotonic_ms();
            let mut guard = self.inner.lock().unwrap_or_else(|e| e.into_inner());
            for (task_id, executor_id) in failed_dispatches {
                guard.state.dispatch_failed(&task_id, &executor_id, now);
                guard.executor_writers.remove(&executor_id);
            }
            for executor_id in dead_executors {
                guard.state.mark_dead(&executor_id, now);
                guard.executor_writers.remove(&executor_id);
            }
            for client in dead_clients {
                guard.client_writers.remove(&client);
            }
            // Loop once more: the failures may have requeued work.
        }
    }
}

fn send_frame(writer: &Option<SharedWriter>, frame: &[u8]) -> bool {
    match writer {
        None => false,
        Some(w) => {
            let mut stream = w.lock().unwrap_or_else(|e| e.into_inner());
            stream.write_all(frame).is_ok()
        }
    }
}

/// Running dispatcher service bound to a local address.
pub struct ServerHandle {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Consistent counter snapshot, for tests and in-process embedding.
    pub fn stats(&self) -> DispatcherStats {
        let mut guard = self.shared.inner.lock().unwrap_or_else(|e| e.into_inner());
        guard.state.stats(monotonic_ms())
    }

    /// Stop accepting, sever every connection, and join service threads.
    pub fn shutdown(mut self) {
        self.shared.shutting_down.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.local_addr);
        {
            let guard = self.shared.inner.lock().unwrap_or_else(|e| e.into_inner());
            for w in guard
                .executor_writers
                .values()
                .chain(guard.client_writers.values())
            {
                let stream = w.lock().unwrap_or_else(|e| e.into_inner());
                let _ = stream.shutdown(std::net::Shutdown::Both);
            }
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Bind and start serving; returns once the listener is live.
pub fn serve(config: ServerConfig) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(&config.bind)?;
    let local_addr = listener.local_addr()?;

    let event_log = match &config.log_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let file = std::fs::File::create(dir.join("events.csv"))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "task_id,event,timestamp_ms")?;
            Some(Mutex::new(w))
        }
        None => None,
    };

    let shared = Arc::new(Shared {
        inner: Mutex::new(Inner {
            state: DispatcherState::new(config.dispatcher.clone()),
            executor_writers: HashMap::new(),
            client_writers: HashMap::new(),
        }),
        shutting_down: AtomicBool::new(false),
        next_client_id: AtomicU64::new(1),
        event_log,
    });

    let accept_shared = Arc::clone(&shared);
    let accept_thread = std::thread::Builder::new()
        .name("dispatcher-accept".into())
        .spawn(move || accept_loop(listener, accept_shared))?;

    let tick_shared = Arc::clone(&shared);
    let tick_ms = config.tick_ms;
    let tick_thread = std::thread::Builder::new()
        .name("dispatcher-tick".into())
        .spawn(move || {
            while !tick_shared.shutting_down.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(tick_ms));
                tick_shared.with_state_and_flush(|state, now| {
                    state.check_liveness(now);
                });
            }
        })?;

    log::info!("dispatcher listening on {local_addr}");
    Ok(ServerHandle {
        local_addr,
        shared,
        threads: vec![accept_thread, tick_thread],
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    loop {
        let (stream, peer) = match listener.accept() {
            Ok(pair) => pair,
            Err(e) => {
                if shared.shutting_down.load(Ordering::SeqCst) {
                    return;
                }
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        if shared.shutting_down.load(Ordering::SeqCst) {
            return;
        }
        let _ = stream.set_nodelay(true);
        let conn_shared = Arc::clone(&shared);
        let name = format!("dispatcher-conn-{peer}");
        let _ = std::thread::Builder::new()
            .name(name)
            .spawn(move || handle_connection(stream, conn_shared));
    }
}

/// The first frame decides whether the peer is an executor (REGISTER) or a
/// client (anything in the client vocabulary).
fn handle_connection(stream: TcpStream, shared: Arc<Shared>) {
    let mut read_half = match stream.try_clone() {
        Ok(s) => s,
        Err(e) => {
            log::warn!("clone failed: {e}");
            return;
        }
    };
    let writer: SharedWriter = Arc::new(Mutex::new(stream));

    let first = match decode(&mut read_half) {
        Ok(m) => m,
        Err(_) => return,
    };

    match first {
        Message::Register(reg) => {
            executor_connection(reg, read_half, writer, shared);
        }
        other => {
            client_connection(other, read_half, writer, shared);
        }
    }
}

fn executor_connection(
    reg: crate::protocol::Register,
    mut read_half: TcpStream,
    writer: SharedWriter,
    shared: Arc<Shared>,
) {
    let ack = {
        let mut guard = shared.inner.lock().unwrap_or_else(|e| e.into_inner());
        match guard.state.register_executor(&reg, monotonic_ms()) {
            Ok(ack) => {
                guard
                    .executor_writers
                    .insert(ack.executor_id.clone(), Arc::clone(&writer));
                ack
            }
            Err(err) => {
                drop(guard);
                let frame = encode(&Message::Error(err)).expect("error frame encodes");
                send_frame(&Some(writer), &frame);
                return;
            }
        }
    };
    let executor_id = ack.executor_id.clone();
    log::info!(
        "executor {executor_id} registered from {} with {} slots",
        reg.address,
        reg.slots
    );
    let frame = encode(&Message::RegisterAck(ack)).expect("ack frame encodes");
    if !send_frame(&Some(Arc::clone(&writer)), &frame) {
        shared.with_state_and_flush(|state, now| state.mark_dead(&executor_id, now));
        return;
    }
    // Registration added capacity; let the queue drain onto it.
    shared.with_state_and_flush(|_, _| {});

    loop {
        match decode(&mut read_half) {
            Ok(Message::Heartbeat(hb)) => {
                let mut guard = shared.inner.lock().unwrap_or_else(|e| e.into_inner());
                guard.state.heartbeat(&hb.executor_id, monotonic_ms());
            }
            Ok(Message::TaskResult(result)) => {
                shared.with_state_and_flush(|state, now| state.handle_result(&result, now));
            }
            Ok(other) => {
                log::warn!(
                    "executor {executor_id} sent unexpected {}; closing",
                    other.kind_name()
                );
                break;
            }
            Err(e) => {
                if !e.is_connection_lost() {
                    log::warn!("executor {executor_id} protocol error: {e}");
                }
                break;
            }
        }
    }

    // Communication failure: same consequences as missed heartbeats.
    {
        let mut guard = shared.inner.lock().unwrap_or_else(|e| e.into_inner());
        guard.executor_writers.remove(&executor_id);
    }
    shared.with_state_and_flush(|state, now| state.mark_dead(&executor_id, now));
    log::info!("executor {executor_id} disconnected");
}

fn client_connection(
    first: Message,
    mut read_half: TcpStream,
    writer: SharedWriter,
    shared: Arc<Shared>,
) {
    let client_id = shared.next_client_id.fetch_add(1, Ordering::SeqCst);
    {
        let mut guard = shared.inner.lock().unwrap_or_else(|e| e.into_inner());
        guard.client_writers.insert(client_id, Arc::clone(&writer));
    }

    let mut next = Some(first);
    loop {
        let msg = match next.take() {
            Some(m) => m,
            None => match decode(&mut read_half) {
                Ok(m) => m,
                Err(e) => {
                    if !e.is_connection_lost() {
                        log::warn!("client {client_id} protocol error: {e}");
                    }
                    break;
                }
            },
        };
        match msg {
            Message::Submit(batch) => {
                let mut ack = None;
                shared.with_state_and_flush(|state, now| {
                    ack = Some(state.submit(&batch, client_id, now));
                });
                let frame = encode(&Message::SubmitAck(ack.expect("submit ran")))
                    .expect("ack frame encodes");
                if !send_frame(&Some(Arc::clone(&writer)), &frame) {
                    break;
                }
            }
            Message::StatsRequest(_) => {
                let stats = {
                    let mut guard = shared.inner.lock().unwrap_or_else(|e| e.into_inner());
                    guard.state.stats(monotonic_ms())
                };
                let frame = encode(&Message::StatsReply(stats.to_reply()))
                    .expect("stats frame encodes");
                if !send_frame(&Some(Arc::clone(&writer)), &frame) {
                    break;
                }
            }
            Message::Shutdown(req) => {
                let targets: Vec<(String, Option<SharedWriter>)> = {
                    let guard = shared.inner.lock().unwrap_or_else(|e| e.into_inner());
                    guard
                        .state
                        .shutdown_targets(&req.executor_ids)
                        .into_iter()
                        .map(|id| {
                            let w = guard.executor_writers.get(&id).cloned();
                            (id, w)
                        })
                        .collect()
                };
                log::info!(
                    "client {client_id} requested shutdown of {} executors",
                    targets.len()
                );
                let frame = encode(&Message::Shutdown(crate::protocol::Shutdown {
                    executor_ids: vec![],
                }))
                .expect("shutdown frame encodes");
                for (id, w) in targets {
                    if !send_frame(&w, &frame) {
                        shared.with_state_and_flush(|state, now| state.mark_dead(&id, now));
                    }
                }
            }
            other => {
                log::warn!(
                    "client {client_id} sent unexpected {}; closing",
                    other.kind_name()
                );
                let frame = encode(&Message::Error(ErrorMsg {
                    code: "unexpected-message".into(),
                    message: format!("{} not valid on a client connection", other.kind_name()),
                }))
                .expect("error frame encodes");
                send_frame(&Some(Arc::clone(&writer)), &frame);
                break;
            }
        }
    }

    let mut guard = shared.inner.lock().unwrap_or_else(|e| e.into_inner());
    guard.client_writers.remove(&client_id);
}
