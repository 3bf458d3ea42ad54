//! Task process execution, staging plumbing, and block-wise file copies.

use std::io::{Read, Write};
use std::path::{Component, Path, PathBuf};
use std::process::Stdio;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::clock::monotonic_ms;
use crate::protocol::{DataKind, DataRef, TaskDispatch, TaskResult, TaskStatus};

use super::cache::DataCache;

/// Fixed block size for bulk reads and writes.
pub const DEFAULT_BLOCK_BYTES: usize = 131_072;

/// Exit code convention for "the process could not be started at all",
/// distinguishing spawn failures from application exit codes.
pub const SPAWN_FAILURE_EXIT_CODE: i32 = -127;

#[derive(Debug, Error)]
pub enum StageError {
    #[error("source missing: {0}")]
    SourceMissing(PathBuf),
    #[error("short copy: expected {expected} bytes, copied {copied}")]
    ShortCopy { expected: u64, copied: u64 },
    #[error("unsafe logical name {0:?}")]
    BadLogicalName(String),
    #[error("declared output {0:?} not produced")]
    MissingOutput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StageError {
    pub fn source(path: &Path, err: std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            StageError::SourceMissing(path.to_path_buf())
        } else {
            StageError::Io(err)
        }
    }
}

/// Stream `reader` into `writer` in fixed-size blocks. Returns bytes copied
/// and the number of blocks issued.
pub fn copy_stream<R: Read, W: Write>(
    reader: &mut R,
    writer: &mut W,
    block_bytes: usize,
) -> Result<(u64, u64), StageError> {
    assert!(block_bytes > 0);
    let mut buf = vec![0u8; block_bytes];
    let mut bytes = 0u64;
    let mut blocks = 0u64;
    loop {
        let mut filled = 0;
        while filled < buf.len() {
            match reader.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(StageError::Io(e)),
            }
        }
        if filled == 0 {
            break;
        }
        writer.write_all(&buf[..filled])?;
        bytes += filled as u64;
        blocks += 1;
        if filled < buf.len() {
            break; // EOF inside this block
        }
    }
    writer.flush()?;
    Ok((bytes, blocks))
}

/// Byte-identical file copy in 128 KiB blocks (or the given size). The copy
/// is checked against the source length seen at open time.
pub fn bulk_copy(src: &Path, dst: &Path, block_bytes: usize) -> Result<u64, StageError> {
    let expected = std::fs::metadata(src)
        .map_err(|e| StageError::source(src, e))?
        .len();
    let mut r = std::fs::File::open(src).map_err(|e| StageError::source(src, e))?;
    let mut w = std::fs::File::create(dst)?;
    let (bytes, _) = copy_stream(&mut r, &mut w, block_bytes)?;
    if bytes != expected {
        return Err(StageError::ShortCopy {
            expected,
            copied: bytes,
        });
    }
    Ok(bytes)
}

/// How the agent turns a task descriptor into a result.
#[derive(Debug, Clone)]
pub enum RunnerKind {
    /// Fork one application process per task.
    Process,
    /// Complete tasks synthetically after a fixed service delay; used for
    /// dispatch-path benchmarks and flow-control tests.
    Synthetic { delay: Duration },
}

/// Logical names become paths inside the sandbox; keep them there.
fn sandbox_rel(name: &str) -> Result<PathBuf, StageError> {
    let p = Path::new(name);
    if name.is_empty()
        || p.is_absolute()
        || p.components()
            .any(|c| !matches!(c, Component::Normal(_)))
    {
        return Err(StageError::BadLogicalName(name.to_string()));
    }
    Ok(p.to_path_buf())
}

pub struct ExecutionEnv<'a> {
    pub cache: &'a DataCache,
    pub executor_id: &'a str,
    /// Where captured stdout/stderr persist (outlives the sandbox).
    pub task_log_dir: &'a Path,
    /// Process-group ids of running children, so connection loss and
    /// shutdown can kill whole task trees.
    pub running_pids: &'a Mutex<std::collections::HashMap<String, i32>>,
}

/// Run one task to completion and produce its result record. Every failure
/// mode maps onto a status: spawn failure is an app failure with the -127
/// convention, staging problems are retryable system failures, and overruns
/// are timeouts with the process tree killed.
pub fn execute_task(env: &ExecutionEnv<'_>, dispatch: &TaskDispatch) -> TaskResult {
    let d = &dispatch.task;
    let base = |status: TaskStatus, exit_code: i32, t_started: u64, t_finished: u64| TaskResult {
        task_id: d.task_id.clone(),
        exit_code,
        status,
        executor_id: env.executor_id.to_string(),
        t_submitted: dispatch.t_submitted,
        t_dispatched: dispatch.t_dispatched,
        t_started,
        t_finished,
        stdout_ref: None,
        stderr_ref: None,
    };

    let sandbox = match stage_inputs(env, d) {
        Ok(dir) => dir,
        Err(e) => {
            log::warn!("task {}: staging failed: {e}", d.task_id);
            let now = monotonic_ms();
            env.cache.task_finalized(&d.task_id);
            return base(TaskStatus::SystemFailure, -1, now, now);
        }
    };

    let t_started = monotonic_ms();
    let stdout_path = sandbox.join(".__stdout");
    let stderr_path = sandbox.join(".__stderr");
    let mut cmd = std::process::Command::new(&d.executable);
    cmd.args(&d.args)
        .envs(&d.env)
        .env("MTCD_TASK_ID", &d.task_id)
        .current_dir(&sandbox)
        .stdin(Stdio::null());
    cmd.stdout(if d.capture_stdout {
        match std::fs::File::create(&stdout_path) {
            Ok(f) => Stdio::from(f),
            Err(_) => Stdio::null(),
        }
    } else {
        Stdio::null()
    });
    cmd.stderr(if d.capture_stderr {
        match std::fs::File::create(&stderr_path) {
            Ok(f) => Stdio::from(f),
            Err(_) => Stdio::null(),
        }
    } else {
        Stdio::null()
    });
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }

    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => {
            log::info!("task {}: spawn failed: {e}", d.task_id);
            let now = monotonic_ms();
            env.cache.task_finalized(&d.task_id);
            return base(TaskStatus::AppFailure, SPAWN_FAILURE_EXIT_CODE, t_started, now);
        }
    };

    let pid = child.id() as i32;
    env.running_pids
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(d.task_id.clone(), pid);

    // Watchdog kills the process group at the wall-time deadline; the main
    // thread blocks in wait() and learns afterwards whether it fired.
    let timed_out = Arc::new(AtomicBool::new(false));
    let (cancel_tx, cancel_rx) = mpsc::channel::<()>();
    let watchdog = {
        let timed_out = Arc::clone(&timed_out);
        let limit = Duration::from_secs(d.wall_time_limit_s as u64);
        std::thread::spawn(move || {
            if cancel_rx.recv_timeout(limit).is_err() {
                timed_out.store(true, Ordering::SeqCst);
                kill_process_group(pid);
            }
        })
    };

    let wait_result = child.wait();
    let _ = cancel_tx.send(());
    let _ = watchdog.join();
    env.running_pids
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .remove(&d.task_id);

    let exit_code = match &wait_result {
        Ok(status) => exit_code_of(status),
        Err(_) => -1,
    };

    let mut result = if timed_out.load(Ordering::SeqCst) {
        base(TaskStatus::Timeout, exit_code, t_started, monotonic_ms())
    } else if exit_code == 0 {
        match persist_outputs(d, &sandbox) {
            Ok(()) => base(TaskStatus::Success, 0, t_started, monotonic_ms()),
            Err(e) => {
                log::warn!("task {}: output persistence failed: {e}", d.task_id);
                base(TaskStatus::SystemFailure, 0, t_started, monotonic_ms())
            }
        }
    } else {
        base(TaskStatus::AppFailure, exit_code, t_started, monotonic_ms())
    };

    if d.capture_stdout {
        result.stdout_ref = persist_capture(env, &d.task_id, "stdout", &stdout_path);
    }
    if d.capture_stderr {
        result.stderr_ref = persist_capture(env, &d.task_id, "stderr", &stderr_path);
    }

    env.cache.task_finalized(&d.task_id);
    debug_assert!(result.timestamps_ordered());
    result
}

/// Synthetic completion for benchmark/simulation agents: no sandbox, no
/// process, just a service delay.
pub fn execute_synthetic(env: &ExecutionEnv<'_>, dispatch: &TaskDispatch, delay: Duration) -> TaskResult {
    let t_started = monotonic_ms();
    if !delay.is_zero() {
        std::thread::sleep(delay);
    }
    TaskResult {
        task_id: dispatch.task.task_id.clone(),
        exit_code: 0,
        status: TaskStatus::Success,
        executor_id: env.executor_id.to_string(),
        t_submitted: dispatch.t_submitted,
        t_dispatched: dispatch.t_dispatched,
        t_started,
        t_finished: monotonic_ms(),
        stdout_ref: None,
        stderr_ref: None,
    }
}

fn stage_inputs(env: &ExecutionEnv<'_>, d: &crate::protocol::TaskDescriptor) -> Result<PathBuf, StageError> {
    let sandbox = env.cache.create_sandbox(&d.task_id)?;
    for r in &d.static_inputs {
        let cached = env.cache.get_static(r, &d.task_id)?;
        let link = sandbox.join(sandbox_rel(&r.logical_name)?);
        if let Some(parent) = link.parent() {
            std::fs::create_dir_all(parent)?;
        }
        #[cfg(unix)]
        std::os::unix::fs::symlink(&cached, &link)?;
        #[cfg(not(unix))]
        bulk_copy(&cached, &link, DEFAULT_BLOCK_BYTES)?;
    }
    for r in &d.dynamic_inputs {
        let dest = sandbox.join(sandbox_rel(&r.logical_name)?);
        env.cache.stage_dynamic(r, &d.task_id, &dest)?;
    }
    Ok(sandbox)
}

/// Outputs appear at their destination only after the process exited:
/// copy to a temporary name next to the target, then rename.
fn persist_outputs(d: &crate::protocol::TaskDescriptor, sandbox: &Path) -> Result<(), StageError> {
    for out in &d.outputs {
        let produced = sandbox.join(sandbox_rel(&out.logical_name)?);
        if !produced.exists() {
            return Err(StageError::MissingOutput(out.logical_name.clone()));
        }
        let dst = Path::new(&out.source_uri);
        if let Some(parent) = dst.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let tmp = dst.with_file_name(format!(
            ".{}.part-{}",
            dst.file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "out".into()),
            d.task_id
        ));
        bulk_copy(&produced, &tmp, DEFAULT_BLOCK_BYTES)?;
        std::fs::rename(&tmp, dst)?;
    }
    Ok(())
}

fn persist_capture(
    env: &ExecutionEnv<'_>,
    task_id: &str,
    which: &str,
    captured: &Path,
) -> Option<DataRef> {
    if !captured.exists() {
        return None;
    }
    if std::fs::create_dir_all(env.task_log_dir).is_err() {
        return None;
    }
    let dst = env.task_log_dir.join(format!("{task_id}.{which}"));
    match bulk_copy(captured, &dst, DEFAULT_BLOCK_BYTES) {
        Ok(bytes) => Some(DataRef {
            logical_name: which.to_string(),
            source_uri: dst.to_string_lossy().into_owned(),
            kind: DataKind::Dynamic,
            size_hint_bytes: Some(bytes),
        }),
        Err(_) => None,
    }
}

fn exit_code_of(status: &std::process::ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return -sig;
        }
    }
    -1
}

/// Kill an entire task process tree (the child leads its own group).
pub fn kill_process_group(pid: i32) {
    #[cfg(unix)]
    // SAFETY: plain syscall; a stale pid at worst signals a nonexistent group.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
    }
    #[cfg(not(unix))]
    let _ = pid;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::TaskDescriptor;
    use sha2::{Digest, Sha256};
    use std::collections::HashMap;

    struct Fixture {
        _dir: tempfile::TempDir,
        cache: DataCache,
        log_dir: PathBuf,
        pids: Mutex<HashMap<String, i32>>,
        store: PathBuf,
    }

    impl Fixture {
        fn new() -> Self {
            let dir = tempfile::tempdir().unwrap();
            let cache = DataCache::new(dir.path().join("cache"), 256 << 20).unwrap();
            let log_dir = dir.path().join("task-logs");
            let store = dir.path().join("store");
            std::fs::create_dir_all(&store).unwrap();
            Self {
                _dir: dir,
                cache,
                log_dir,
                pids: Mutex::new(HashMap::new()),
                store,
            }
        }

        fn env(&self) -> ExecutionEnv<'_> {
            ExecutionEnv {
                cache: &self.cache,
                executor_id: "e-test",
                task_log_dir: &self.log_dir,
                running_pids: &self.pids,
            }
        }

        fn dispatch(&self, d: TaskDescriptor) -> TaskDispatch {
            let now = monotonic_ms();
            TaskDispatch {
                task: d,
                t_submitted: now,
                t_dispatched: now,
            }
        }
    }

    fn digest(path: &Path) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(std::fs::read(path).unwrap());
        h.finalize().into()
    }

    #[test]
    fn noop_task_succeeds_with_exit_zero() {
        let fx = Fixture::new();
        let r = execute_task(&fx.env(), &fx.dispatch(TaskDescriptor::new("t1", "/bin/true")));
        assert_eq!(r.status, TaskStatus::Success);
        assert_eq!(r.exit_code, 0);
        assert!(r.timestamps_ordered());
    }

    #[test]
    fn nonzero_exit_is_app_failure() {
        let fx = Fixture::new();
        let r = execute_task(&fx.env(), &fx.dispatch(TaskDescriptor::new("t1", "/bin/false")));
        assert_eq!(r.status, TaskStatus::AppFailure);
        assert_eq!(r.exit_code, 1);
    }

    #[test]
    fn missing_executable_uses_spawn_failure_convention() {
        let fx = Fixture::new();
        let r = execute_task(
            &fx.env(),
            &fx.dispatch(TaskDescriptor::new("t1", "/no/such/binary")),
        );
        assert_eq!(r.status, TaskStatus::AppFailure);
        assert_eq!(r.exit_code, SPAWN_FAILURE_EXIT_CODE);
    }

    #[test]
    fn overrunning_task_times_out_and_dies() {
        let fx = Fixture::new();
        let mut d = TaskDescriptor::new("t1", "/bin/sleep");
        d.args = vec!["30".into()];
        d.wall_time_limit_s = 1;
        let started = std::time::Instant::now();
        let r = execute_task(&fx.env(), &fx.dispatch(d));
        assert_eq!(r.status, TaskStatus::Timeout);
        let elapsed = started.elapsed();
        assert!(elapsed >= Duration::from_millis(900), "{elapsed:?}");
        assert!(elapsed < Duration::from_secs(5), "{elapsed:?}");
    }

    #[test]
    fn task_env_carries_task_id_and_outputs_persist() {
        let fx = Fixture::new();
        let out_uri = fx.store.join("result.txt");
        let mut d = TaskDescriptor::new("task-77", "/bin/sh");
        d.args = vec![
            "-c".into(),
            "printf '%s' \"$MTCD_TASK_ID\" > result.txt".into(),
        ];
        d.outputs.push(DataRef {
            logical_name: "result.txt".into(),
            source_uri: out_uri.to_string_lossy().into_owned(),
            kind: DataKind::Dynamic,
            size_hint_bytes: None,
        });
        let r = execute_task(&fx.env(), &fx.dispatch(d));
        assert_eq!(r.status, TaskStatus::Success);
        assert_eq!(std::fs::read_to_string(&out_uri).unwrap(), "task-77");
        // Sandbox cleaned up after finalization.
        assert!(!fx.cache.sandbox_dir("task-77").exists());
        // No temp files left next to the output.
        let leftovers: Vec<_> = std::fs::read_dir(&fx.store)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .filter(|n| n.to_string_lossy().contains(".part-"))
            .collect();
        assert!(leftovers.is_empty(), "{leftovers:?}");
    }

    #[test]
    fn declared_output_missing_after_success_is_system_failure() {
        let fx = Fixture::new();
        let mut d = TaskDescriptor::new("t1", "/bin/true");
        d.outputs.push(DataRef {
            logical_name: "never-made".into(),
            source_uri: fx.store.join("never").to_string_lossy().into_owned(),
            kind: DataKind::Dynamic,
            size_hint_bytes: None,
        });
        let r = execute_task(&fx.env(), &fx.dispatch(d));
        assert_eq!(r.status, TaskStatus::SystemFailure);
    }

    #[test]
    fn staging_failure_is_retryable_system_failure() {
        let fx = Fixture::new();
        let mut d = TaskDescriptor::new("t1", "/bin/true");
        d.static_inputs.push(DataRef {
            logical_name: "gone".into(),
            source_uri: fx.store.join("missing-input").to_string_lossy().into_owned(),
            kind: DataKind::Static,
            size_hint_bytes: None,
        });
        let r = execute_task(&fx.env(), &fx.dispatch(d));
        assert_eq!(r.status, TaskStatus::SystemFailure);
        assert!(r.status.is_retryable());
    }

    #[test]
    fn inputs_visible_by_logical_name_in_sandbox() {
        let fx = Fixture::new();
        let src = fx.store.join("data.bin");
        std::fs::write(&src, b"payload").unwrap();
        let mut d = TaskDescriptor::new("t1", "/bin/sh");
        d.args = vec!["-c".into(), "cat s.in d.in > merged".into()];
        d.static_inputs.push(DataRef {
            logical_name: "s.in".into(),
            source_uri: src.to_string_lossy().into_owned(),
            kind: DataKind::Static,
            size_hint_bytes: None,
        });
        d.dynamic_inputs.push(DataRef {
            logical_name: "d.in".into(),
            source_uri: src.to_string_lossy().into_owned(),
            kind: DataKind::Dynamic,
            size_hint_bytes: None,
        });
        let out = fx.store.join("merged");
        d.outputs.push(DataRef {
            logical_name: "merged".into(),
            source_uri: out.to_string_lossy().into_owned(),
            kind: DataKind::Dynamic,
            size_hint_bytes: None,
        });
        let r = execute_task(&fx.env(), &fx.dispatch(d));
        assert_eq!(r.status, TaskStatus::Success);
        assert_eq!(std::fs::read(&out).unwrap(), b"payloadpayload");
    }

    #[test]
    fn captured_stdout_persists_with_ref() {
        let fx = Fixture::new();
        let mut d = TaskDescriptor::new("t1", "/bin/sh");
        d.args = vec!["-c".into(), "echo hello-out; echo hello-err >&2".into()];
        d.capture_stdout = true;
        d.capture_stderr = true;
        let r = execute_task(&fx.env(), &fx.dispatch(d));
        assert_eq!(r.status, TaskStatus::Success);
        let stdout_ref = r.stdout_ref.expect("stdout captured");
        let stderr_ref = r.stderr_ref.expect("stderr captured");
        assert_eq!(
            std::fs::read_to_string(&stdout_ref.source_uri).unwrap(),
            "hello-out\n"
        );
        assert_eq!(
            std::fs::read_to_string(&stderr_ref.source_uri).unwrap(),
            "hello-err\n"
        );
    }

    #[test]
    fn logical_names_cannot_escape_sandbox() {
        assert!(sandbox_rel("../evil").is_err());
        assert!(sandbox_rel("/abs").is_err());
        assert!(sandbox_rel("").is_err());
        assert!(sandbox_rel("ok/nested.txt").is_ok());
    }

    #[test]
    fn synthetic_runner_completes_without_process() {
        let fx = Fixture::new();
        let r = execute_synthetic(
            &fx.env(),
            &fx.dispatch(TaskDescriptor::new("t1", "ignored")),
            Duration::ZERO,
        );
        assert_eq!(r.status, TaskStatus::Success);
        assert!(r.timestamps_ordered());
    }

    #[test]
    fn copy_stream_zero_byte_file() {
        let mut src = std::io::Cursor::new(Vec::<u8>::new());
        let mut dst = Vec::new();
        let (bytes, blocks) = copy_stream(&mut src, &mut dst, DEFAULT_BLOCK_BYTES).unwrap();
        assert_eq!(bytes, 0);
        assert_eq!(blocks, 0);
        assert!(dst.is_empty());
    }

    #[test]
    fn copy_stream_one_byte_over_block_boundary_uses_two_blocks() {
        let data = vec![0xabu8; DEFAULT_BLOCK_BYTES + 1];
        let mut src = std::io::Cursor::new(data.clone());
        let mut dst = Vec::new();
        let (bytes, blocks) = copy_stream(&mut src, &mut dst, DEFAULT_BLOCK_BYTES).unwrap();
        assert_eq!(bytes, data.len() as u64);
        assert_eq!(blocks, 2);
        assert_eq!(dst, data);
    }

    #[test]
    fn bulk_copy_is_byte_identical_on_random_data() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        let dst = dir.path().join("dst");
        // 1 MiB of varied bytes.
        let data: Vec<u8> = (0..(1 << 20)).map(|i| (i * 31 % 251) as u8).collect();
        std::fs::write(&src, &data).unwrap();
        let bytes = bulk_copy(&src, &dst, DEFAULT_BLOCK_BYTES).unwrap();
        assert_eq!(bytes, 1 << 20);
        assert_eq!(digest(&src), digest(&dst));
    }

    #[test]
    fn concurrent_tasks_use_disjoint_sandboxes() {
        let fx = Fixture::new();
        let env_holder = std::sync::Arc::new(fx);
        let mut handles = Vec::new();
        for i in 0..4 {
            let fxc = std::sync::Arc::clone(&env_holder);
            handles.push(std::thread::spawn(move || {
                let mut d = TaskDescriptor::new(format!("iso-{i}"), "/bin/sh");
                // pwd is the sandbox; report it through captured stdout.
                d.args = vec!["-c".into(), "pwd".into()];
                d.capture_stdout = true;
                let r = execute_task(&fxc.env(), &fxc.dispatch(d));
                assert_eq!(r.status, TaskStatus::Success);
                std::fs::read_to_string(r.stdout_ref.unwrap().source_uri).unwrap()
            }));
        }
        let mut dirs: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        dirs.sort();
        dirs.dedup();
        assert_eq!(dirs.len(), 4, "sandboxes must not be shared");
    }
}
