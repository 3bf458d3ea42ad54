//! Framed wire protocol shared by the client↔dispatcher and
//! dispatcher↔executor conversations.
//!
//! Every message travels as one frame over a persistent stream connection:
//!
//! ```text
//! [len: u32 big-endian][tag: u8][payload: canonical JSON, UTF-8]
//! ```
//!
//! `len` counts the tag byte plus the payload bytes. Payloads are serialized
//! with object keys sorted, so encoding is deterministic: equal messages
//! produce identical frames.

mod codec;
mod types;

pub use codec::{decode, decode_from_slice, encode, CodecError, FrameReader, MAX_FRAME_LEN};
pub use types::{DataKind, DataRef, TaskDescriptor, TaskResult, TaskStatus};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Protocol version carried in REGISTER; mismatches are rejected at
/// registration time.
pub const PROTOCOL_VERSION: u32 = 1;

/// Executor announcing itself to a dispatcher. `address` is a stable
/// identity chosen by the agent (not the ephemeral socket peer), so the
/// dispatcher can recognize a re-registration after a drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Register {
    pub protocol_version: u32,
    pub slots: u32,
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub executor_id: String,
    pub heartbeat_interval_ms: u64,
}

/// Task handed to an executor, with the dispatcher-side timestamps so the
/// executor can return a complete timestamp chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDispatch {
    pub task: TaskDescriptor,
    pub t_submitted: u64,
    pub t_dispatched: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub executor_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suspend {
    pub executor_id: String,
    pub reason: String,
}

/// Sent by a dispatcher to tell an executor to terminate, or by an admin
/// client to ask the dispatcher to shut executors down. An empty id list
/// targets every registered executor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shutdown {
    #[serde(default)]
    pub executor_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submit {
    pub tasks: Vec<TaskDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedTask {
    pub task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub accepted: Vec<String>,
    #[serde(default)]
    pub rejected: Vec<RejectedTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultNotify {
    pub result: TaskResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRequest {}

/// Mirror of the dispatcher's counters; field names match `DispatcherStats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReply {
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
    pub advertised_slots: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub code: String,
    pub message: String,
}

/// Tagged protocol unit for all three wire conversations.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Register(Register),
    RegisterAck(RegisterAck),
    TaskDispatch(TaskDispatch),
    TaskResult(TaskResult),
    Heartbeat(Heartbeat),
    Suspend(Suspend),
    Shutdown(Shutdown),
    Submit(Submit),
    SubmitAck(SubmitAck),
    ResultNotify(ResultNotify),
    StatsRequest(StatsRequest),
    StatsReply(StatsReply),
    Error(ErrorMsg),
}

impl Message {
    /// Wire tag. These assignments are part of the external interface and
    /// must not change.
    pub fn tag(&self) -> u8 {
        match self {
            Message::Register(_) => 1,
            Message::RegisterAck(_) => 2,
            Message::TaskDispatch(_) => 3,
            Message::TaskResult(_) => 4,
            Message::Heartbeat(_) => 5,
            Message::Suspend(_) => 6,
            Message::Shutdown(_) => 7,
            Message::Submit(_) => 8,
            Message::SubmitAck(_) => 9,
            Message::ResultNotify(_) => 10,
            Message::StatsRequest(_) => 11,
            Message::StatsReply(_) => 12,
            Message::Error(_) => 13,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Message::Register(_) => "REGISTER",
            Message::RegisterAck(_) => "REGISTER_ACK",
            Message::TaskDispatch(_) => "TASK_DISPATCH",
            Message::TaskResult(_) => "TASK_RESULT",
            Message::Heartbeat(_) => "HEARTBEAT",
            Message::Suspend(_) => "SUSPEND",
            Message::Shutdown(_) => "SHUTDOWN",
            Message::Submit(_) => "SUBMIT",
            Message::SubmitAck(_) => "SUBMIT_ACK",
            Message::ResultNotify(_) => "RESULT_NOTIFY",
            Message::StatsRequest(_) => "STATS_REQUEST",
            Message::StatsReply(_) => "STATS_REPLY",
            Message::Error(_) => "ERROR",
        }
    }
}

/// Canonical JSON: route through `serde_json::Value` so object keys come out
/// sorted regardless of struct field order.
pub(crate) fn canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Env-style map type used in task descriptors; kept as an alias so call
/// sites read as what they are.
pub type EnvMap = BTreeMap<String, String>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_assignments_are_pinned() {
        let cases: Vec<(Message, u8)> = vec![
            (
                Message::Register(Register {
                    protocol_version: 1,
                    slots: 1,
                    address: "a".into(),
                }),
                1,
            ),
            (
                Message::RegisterAck(RegisterAck {
                    executor_id: "e".into(),
                    heartbeat_interval_ms: 5000,
                }),
                2,
            ),
            (
                Message::TaskDispatch(TaskDispatch {
                    task: TaskDescriptor::new("t", "/bin/true"),
                    t_submitted: 0,
                    t_dispatched: 0,
                }),
                3,
            ),
            (
                Message::TaskResult(TaskResult {
                    task_id: "t".into(),
                    exit_code: 0,
                    status: TaskStatus::Success,
                    executor_id: "e".into(),
                    t_submitted: 0,
                    t_dispatched: 0,
                    t_started: 0,
                    t_finished: 0,
                    stdout_ref: None,
                    stderr_ref: None,
                }),
                4,
            ),
            (
                Message::Heartbeat(Heartbeat {
                    executor_id: "e".into(),
                }),
                5,
            ),
            (
                Message::Suspend(Suspend {
                    executor_id: "e".into(),
                    reason: "r".into(),
                }),
                6,
            ),
            (
                Message::Shutdown(Shutdown {
                    executor_ids: vec![],
                }),
                7,
            ),
            (Message::Submit(Submit { tasks: vec![] }), 8),
            (
                Message::SubmitAck(SubmitAck {
                    accepted: vec![],
                    rejected: vec![],
                }),
                9,
            ),
            (
                Message::ResultNotify(ResultNotify {
                    result: TaskResult {
                        task_id: "t".into(),
                        exit_code: 0,
                        status: TaskStatus::Success,
                        executor_id: "e".into(),
                        t_submitted: 0,
                        t_dispatched: 0,
                        t_started: 0,
                        t_finished: 0,
                        stdout_ref: None,
                        stderr_ref: None,
                    },
                }),
                10,
            ),
            (Message::StatsRequest(StatsRequest {}), 11),
            (
                Message::StatsReply(StatsReply {
                    submitted: 0,
                    queued: 0,
                    dispatched_running: 0,
                    completed_ok: 0,
                    failed_app: 0,
                    failed_system: 0,
                    rescheduled: 0,
                    current_throughput_tasks_per_s: 0.0,
                    registered_executors: 0,
                    suspended_executors: 0,
                    advertised_slots: 0,
                }),
                12,
            ),
            (
                Message::Error(ErrorMsg {
                    code: "c".into(),
                    message: "m".into(),
                }),
                13,
            ),
        ];
        for (msg, tag) in cases {
            assert_eq!(msg.tag(), tag, "wrong tag for {}", msg.kind_name());
        }
    }

    #[test]
    fn canonical_json_sorts_keys() {
        #[derive(Serialize)]
        struct Unsorted {
            zeta: u32,
            alpha: u32,
        }
        let s = canonical_json(&Unsorted { zeta: 1, alpha: 2 }).unwrap();
        assert_eq!(s, r#"{"alpha":2,"zeta":1}"#);
    }
}
