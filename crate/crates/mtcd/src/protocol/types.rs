//! Task-level domain records carried on the wire.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Where a piece of task data lives and how it is reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Reused across many tasks; cached persistently on the executor.
    Static,
    /// Consumed by exactly one task; staged fresh every time.
    Dynamic,
}

/// Reference to a file in the persistent store, named logically within a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRef {
    pub logical_name: String,
    pub source_uri: String,
    pub kind: DataKind,
    #[serde(default)]
    pub size_hint_bytes: Option<u64>,
}

fn default_wall_time_limit() -> u32 {
    300
}

fn default_retries() -> u32 {
    3
}

/// One unit of work: executable, arguments, data references, limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_id: String,
    pub executable: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub static_inputs: Vec<DataRef>,
    #[serde(default)]
    pub dynamic_inputs: Vec<DataRef>,
    #[serde(default)]
    pub outputs: Vec<DataRef>,
    #[serde(default = "default_wall_time_limit")]
    pub wall_time_limit_s: u32,
    #[serde(default = "default_retries")]
    pub retries_remaining: u32,
    #[serde(default)]
    pub capture_stdout: bool,
    #[serde(default)]
    pub capture_stderr: bool,
}

impl TaskDescriptor {
    /// Minimal descriptor with defaults for everything but id and executable.
    pub fn new(task_id: impl Into<String>, executable: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            executable: executable.into(),
            args: Vec::new(),
            env: BTreeMap::new(),
            static_inputs: Vec::new(),
            dynamic_inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_limit_s: default_wall_time_limit(),
            retries_remaining: default_retries(),
            capture_stdout: false,
            capture_stderr: false,
        }
    }

    /// Structural validity: non-empty executable, positive wall-time limit,
    /// logical names unique across all data references.
    pub fn validate(&self) -> Result<(), String> {
        if self.task_id.is_empty() {
            return Err("task_id must be non-empty".into());
        }
        if self.executable.is_empty() {
            return Err("executable must be non-empty".into());
        }
        if self.wall_time_limit_s == 0 {
            return Err("wall_time_limit_s must be positive".into());
        }
        let mut seen = std::collections::HashSet::new();
        for r in self
            .static_inputs
            .iter()
            .chain(&self.dynamic_inputs)
            .chain(&self.outputs)
        {
            if !seen.insert(r.logical_name.as_str()) {
                return Err(format!("duplicate logical_name {:?}", r.logical_name));
            }
        }
        Ok(())
    }
}

/// Terminal state of one task attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Success,
    AppFailure,
    SystemFailure,
    Timeout,
    Lost,
}

impl TaskStatus {
    /// Failures the dispatcher may retry; application failures go back to
    /// the client untouched.
    pub fn is_retryable(self) -> bool {
        matches!(
            self,
            TaskStatus::SystemFailure | TaskStatus::Timeout | TaskStatus::Lost
        )
    }
}

impl std::fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskStatus::Success => "success",
            TaskStatus::AppFailure => "app_failure",
            TaskStatus::SystemFailure => "system_failure",
            TaskStatus::Timeout => "timeout",
            TaskStatus::Lost => "lost",
        };
        f.write_str(s)
    }
}

/// Outcome record with exit code, status, and the full timestamp chain
/// (monotonic milliseconds; `t_submitted <= t_dispatched <= t_started <=
/// t_finished`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: String,
    pub exit_code: i32,
    pub status: TaskStatus,
    pub executor_id: String,
    pub t_submitted: u64,
    pub t_dispatched: u64,
    pub t_started: u64,
    pub t_finished: u64,
    #[serde(default)]
    pub stdout_ref: Option<DataRef>,
    #[serde(default)]
    pub stderr_ref: Option<DataRef>,
}

impl TaskResult {
    pub fn timestamps_ordered(&self) -> bool {
        self.t_submitted <= self.t_dispatched
            && self.t_dispatched <= self.t_started
            && self.t_started <= self.t_finished
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_empty_executable() {
        let mut d = TaskDescriptor::new("t1", "/bin/true");
        d.executable.clear();
        assert!(d.validate().is_err());
    }

    #[test]
    fn validate_rejects_zero_wall_time() {
        let mut d = TaskDescriptor::new("t1", "/bin/true");
        d.wall_time_limit_s = 0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn validate_rejects_duplicate_logical_names() {
        let mut d = TaskDescriptor::new("t1", "/bin/true");
        let r = DataRef {
            logical_name: "in".into(),
            source_uri: "/store/a".into(),
            kind: DataKind::Static,
            size_hint_bytes: None,
        };
        d.static_inputs.push(r.clone());
        d.dynamic_inputs.push(DataRef {
            kind: DataKind::Dynamic,
            ..r
        });
        assert!(d.validate().is_err());
    }

    #[test]
    fn timestamp_chain_check() {
        let r = TaskResult {
            task_id: "t".into(),
            exit_code: 0,
            status: TaskStatus::Success,
            executor_id: "e".into(),
            t_submitted: 1,
            t_dispatched: 2,
            t_started: 3,
            t_finished: 4,
            stdout_ref: None,
            stderr_ref: None,
        };
        assert!(r.timestamps_ordered());
        let mut bad = r;
        bad.t_started = 1;
        assert!(!bad.timestamps_ordered());
    }
}
