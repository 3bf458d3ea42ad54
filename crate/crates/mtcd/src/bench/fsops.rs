//! Shared-filesystem microbenchmarks: metadata operation costs under
//! concurrency (create file/dir, script invocation, no-op fork) and bulk
//! read / read+write rates at a fixed block size.
//!
//! Workers start on a barrier so every operation lands on the filesystem at
//! once. Independent OS processes are preferred (they defeat in-process
//! caching); threads are the fallback behind a flag. The single-dir versus
//! many-dirs layouts contrast contention on one directory against
//! pre-created per-worker directories.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::clock::monotonic_ms;
use crate::executor::copy_stream;

use super::report::BenchReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsOp {
    CreateFile,
    CreateDir,
    InvokeScript,
    NoopTask,
}

impl FsOp {
    pub fn name(self) -> &'static str {
        match self {
            FsOp::CreateFile => "create_file",
            FsOp::CreateDir => "create_dir",
            FsOp::InvokeScript => "invoke_script",
            FsOp::NoopTask => "noop_task",
        }
    }
}

impl FromStr for FsOp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "create_file" => Ok(FsOp::CreateFile),
            "create_dir" => Ok(FsOp::CreateDir),
            "invoke_script" => Ok(FsOp::InvokeScript),
            "noop_task" => Ok(FsOp::NoopTask),
            other => Err(format!("unknown op {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    SingleDir,
    ManyDirs,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::SingleDir => "single_dir",
            Layout::ManyDirs => "many_dirs",
        }
    }
}

impl FromStr for Layout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single_dir" => Ok(Layout::SingleDir),
            "many_dirs" => Ok(Layout::ManyDirs),
            other => Err(format!("unknown layout {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RwMode {
    Read,
    ReadWrite,
}

impl RwMode {
    pub fn name(self) -> &'static str {
        match self {
            RwMode::Read => "read",
            RwMode::ReadWrite => "read_write",
        }
    }
}

impl FromStr for RwMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read" => Ok(RwMode::Read),
            "read_write" => Ok(RwMode::ReadWrite),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Worker processes need the path of a binary exposing the hidden
/// `fsops-worker` / `rw-worker` subcommands (the `bench` binary does).
#[derive(Debug, Clone)]
pub enum WorkerMode {
    Processes { worker_bin: PathBuf },
    Threads,
}

#[derive(Debug, Clone)]
pub struct FsOpsParams {
    pub op: FsOp,
    pub concurrency: usize,
    pub layout: Layout,
    pub target_dir: PathBuf,
    /// Ops each worker performs after the barrier (more ops, steadier means).
    pub ops_per_worker: usize,
    pub mode: WorkerMode,
}

/// What one worker reports back: per-op wall times plus its active window.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutput {
    pub per_op_ms: Vec<f64>,
    pub start_ms: u64,
    pub end_ms: u64,
}

impl WorkerOutput {
    /// Stdout encoding used by worker processes.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for v in &self.per_op_ms {
            writeln!(w, "{v}")?;
        }
        writeln!(w, "phase {} {}", self.start_ms, self.end_ms)
    }

    pub fn parse_from(r: impl BufRead) -> std::io::Result<Self> {
        let mut per_op_ms = Vec::new();
        let mut start_ms = 0;
        let mut end_ms = 0;
        for line in r.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("phase ") {
                let mut parts = rest.split_whitespace();
                start_ms = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
                end_ms = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
            } else if let Ok(v) = line.parse::<f64>() {
                per_op_ms.push(v);
            }
        }
        Ok(Self {
            per_op_ms,
            start_ms,
            end_ms,
        })
    }
}

fn wait_until(start_at_ms: u64) {
    loop {
        let now = monotonic_ms();
        if now >= start_at_ms {
            return;
        }
        if start_at_ms - now > 2 {
            std::thread::sleep(Duration::from_millis(1));
        } else {
            std::hint::spin_loop();
        }
    }
}

fn op_dir(base: &Path, layout: Layout, worker: usize) -> PathBuf {
    match layout {
        Layout::SingleDir => base.join("shared"),
        Layout::ManyDirs => base.join(format!("w{worker}")),
    }
}

/// Body of one fsops worker (run in-process for thread mode, or behind the
/// hidden `fsops-worker` subcommand for process mode).
pub fn run_fsops_worker(
    op: FsOp,
    dir: &Path,
    worker: usize,
    ops: usize,
    start_at_ms: u64,
    script: Option<&Path>,
) -> std::io::Result<WorkerOutput> {
    wait_until(start_at_ms);
    let start_ms = monotonic_ms();
    let mut per_op_ms = Vec::with_capacity(ops);
    for k in 0..ops {
        let t0 = std::time::Instant::now();
        match op {
            FsOp::CreateFile => {
                let path = dir.join(format!("f-{worker}-{k}"));
                std::fs::OpenOptions::new()
                    .create_new(true)
                    .write(true)
                    .open(path)?;
            }
            FsOp::CreateDir => {
                std::fs::create_dir(dir.join(format!("d-{worker}-{k}")))?;
            }
            FsOp::InvokeScript => {
                let script = script.expect("invoke_script needs a script path");
                let status = std::process::Command::new(script)
                    .stdout(std::process::Stdio::null())
                    .stderr(std::process::Stdio::null())
                    .status()?;
                if !status.success() {
                    return Err(std::io::Error::other("script failed"));
                }
            }
            FsOp::NoopTask => {
                std::process::Command::new("/bin/true").status()?;
            }
        }
        per_op_ms.push(t0.elapsed().as_secs_f64() * 1000.0);
    }
    Ok(WorkerOutput {
        per_op_ms,
        start_ms,
        end_ms: monotonic_ms(),
    })
}

/// Body of one read/readwrite worker.
pub fn run_rw_worker(
    mode: RwMode,
    input: &Path,
    output: Option<&Path>,
    block_bytes: usize,
    start_at_ms: u64,
) -> std::io::Result<WorkerOutput> {
    wait_until(start_at_ms);
    let start_ms = monotonic_ms();
    let t0 = std::time::Instant::now();
    let mut reader = std::fs::File::open(input)?;
    match mode {
        RwMode::Read => {
            let mut sink = std::io::sink();
            copy_stream(&mut reader, &mut sink, block_bytes)
                .map_err(|e| std::io::Error::other(e.to_string()))?;
        }
        RwMode::ReadWrite => {
            let out = output.expect("read_write needs an output path");
            let mut writer = std::fs::File::create(out)?;
            copy_stream(&mut reader, &mut writer, block_bytes)
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            writer.sync_data().ok();
        }
    }
    Ok(WorkerOutput {
        per_op_ms: vec![t0.elapsed().as_secs_f64() * 1000.0],
        start_ms,
        end_ms: monotonic_ms(),
    })
}

fn spawn_barrier_workers<F>(
    concurrency: usize,
    mode: &WorkerMode,
    start_at_ms: u64,
    thread_body: F,
    process_args: impl Fn(usize) -> Vec<String>,
) -> std::io::Result<Vec<WorkerOutput>>
where
    F: Fn(usize) -> std::io::Result<WorkerOutput> + Send + Sync + 'static + Clone,
{
    match mode {
        WorkerMode::Threads => {
            let mut handles = Vec::new();
            for i in 0..concurrency {
                let body = thread_body.clone();
                handles.push(std::thread::spawn(move || body(i)));
            }
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| std::io::Error::other("worker panicked"))?)
                .collect()
        }
        WorkerMode::Processes { worker_bin } => {
            let mut children = Vec::new();
            for i in 0..concurrency {
                let child = std::process::Command::new(worker_bin)
                    .args(process_args(i))
                    .stdout(std::process::Stdio::piped())
                    .stderr(std::process::Stdio::inherit())
                    .spawn()?;
                children.push(child);
            }
            if monotonic_ms() > start_at_ms {
                log::warn!("spawn allowance too small; barrier start was late");
            }
            let mut outputs = Vec::new();
            for child in children {
                let out = child.wait_with_output()?;
                if !out.status.success() {
                    return Err(std::io::Error::other(format!(
                        "worker exited with {:?}",
                        out.status.code()
                    )));
                }
                outputs.push(WorkerOutput::parse_from(std::io::Cursor::new(out.stdout))?);
            }
            Ok(outputs)
        }
    }
}

fn barrier_start(concurrency: usize, mode: &WorkerMode) -> u64 {
    let allowance = match mode {
        WorkerMode::Threads => 50 + concurrency as u64 / 4,
        WorkerMode::Processes { .. } => 500 + 5 * concurrency as u64,
    };
    monotonic_ms() + allowance
}

fn finish_report(
    mut report: BenchReport,
    outputs: Vec<WorkerOutput>,
    total_ops: usize,
    bytes_per_op: Option<u64>,
) -> BenchReport {
    let mut samples = Vec::with_capacity(total_ops);
    let mut window_start = u64::MAX;
    let mut window_end = 0u64;
    let mut failures = 0usize;
    for out in &outputs {
        samples.extend_from_slice(&out.per_op_ms);
        window_start = window_start.min(out.start_ms);
        window_end = window_end.max(out.end_ms);
    }
    failures += total_ops.saturating_sub(samples.len());
    report.samples = samples;
    report.partial = failures > 0;
    if window_end > window_start {
        let window_s = (window_end - window_start) as f64 / 1000.0;
        report
            .derived
            .insert("aggregate_ops_per_s".into(), report.samples.len() as f64 / window_s);
        if let Some(bytes) = bytes_per_op {
            let total_bytes = bytes as f64 * report.samples.len() as f64;
            report
                .derived
                .insert("aggregate_mb_per_s".into(), total_bytes / window_s / 1e6);
        }
        report.derived.insert("window_s".into(), window_s);
    }
    report
}

/// Concurrency-`N` metadata benchmark with a barrier start.
pub fn bench_fsops(params: &FsOpsParams) -> std::io::Result<BenchReport> {
    assert!(params.concurrency >= 1);
    assert!(params.ops_per_worker >= 1);
    let base = &params.target_dir;
    std::fs::create_dir_all(base)?;
    match params.layout {
        Layout::SingleDir => {
            std::fs::create_dir_all(base.join("shared"))?;
        }
        Layout::ManyDirs => {
            for i in 0..params.concurrency {
                std::fs::create_dir_all(base.join(format!("w{i}")))?;
            }
        }
    }
    let script = base.join("op-script.sh");
    if params.op == FsOp::InvokeScript && !script.exists() {
        std::fs::write(&script, "#!/bin/sh\nexit 0\n")?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755))?;
        }
    }

    let start_at = barrier_start(params.concurrency, &params.mode);
    let op = params.op;
    let layout = params.layout;
    let ops = params.ops_per_worker;
    let base_clone = base.clone();
    let script_clone = script.clone();
    let outputs = spawn_barrier_workers(
        params.concurrency,
        &params.mode,
        start_at,
        move |i| {
            let dir = op_dir(&base_clone, layout, i);
            run_fsops_worker(op, &dir, i, ops, start_at, Some(&script_clone))
        },
        |i| {
            vec![
                "fsops-worker".into(),
                "--op".into(),
                op.name().into(),
                "--dir".into(),
                op_dir(base, layout, i).to_string_lossy().into_owned(),
                "--worker".into(),
                i.to_string(),
                "--ops".into(),
                ops.to_string(),
                "--start-at-ms".into(),
                start_at.to_string(),
                "--script".into(),
                script.to_string_lossy().into_owned(),
            ]
        },
    )?;

    let report = BenchReport::new(
        "fsops",
        format!("{}_{}_c{}", params.op.name(), params.layout.name(), params.concurrency),
    )
    .with_param("op", params.op.name())
    .with_param("layout", params.layout.name())
    .with_param("concurrency", params.concurrency)
    .with_param("ops_per_worker", params.ops_per_worker);
    Ok(finish_report(
        report,
        outputs,
        params.concurrency * params.ops_per_worker,
        None,
    ))
}

/// Bulk read / read+write benchmark over per-worker files of a fixed size.
pub fn bench_readwrite(
    file_size_bytes: u64,
    concurrency: usize,
    mode: RwMode,
    block_bytes: usize,
    target_dir: &Path,
    worker_mode: &WorkerMode,
) -> std::io::Result<BenchReport> {
    assert!(concurrency >= 1 && block_bytes >= 1);
    let base = target_dir.join("rw");
    std::fs::create_dir_all(&base)?;
    // Pre-create input files with a varied byte pattern.
    let pattern: Vec<u8> = (0..8192u64).map(|i| (i * 131 % 251) as u8).collect();
    for i in 0..concurrency {
        let path = base.join(format!("in-{i}"));
        let existing = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        if existing != file_size_bytes {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
            let mut written = 0u64;
            while written < file_size_bytes {
                let n = pattern.len().min((file_size_bytes - written) as usize);
                f.write_all(&pattern[..n])?;
                written += n as u64;
            }
            f.flush()?;
        }
    }

    let start_at = barrier_start(concurrency, worker_mode);
    let base_clone = base.clone();
    let outputs = spawn_barrier_workers(
        concurrency,
        worker_mode,
        start_at,
        move |i| {
            let input = base_clone.join(format!("in-{i}"));
            let output = base_clone.join(format!("out-{i}"));
            run_rw_worker(
                mode,
                &input,
                matches!(mode, RwMode::ReadWrite).then_some(output.as_path()),
                block_bytes,
                start_at,
            )
        },
        |i| {
            vec![
                "rw-worker".into(),
                "--mode".into(),
                mode.name().into(),
                "--input".into(),
                base.join(format!("in-{i}")).to_string_lossy().into_owned(),
                "--output".into(),
                base.join(format!("out-{i}")).to_string_lossy().into_owned(),
                "--block-bytes".into(),
                block_bytes.to_string(),
                "--start-at-ms".into(),
                start_at.to_string(),
            ]
        },
    )?;

    let report = BenchReport::new(
        "readwrite",
        format!("{}_c{}_b{}", mode.name(), concurrency, block_bytes),
    )
    .with_param("mode", mode.name())
    .with_param("concurrency", concurrency)
    .with_param("file_size_bytes", file_size_bytes)
    .with_param("block_bytes", block_bytes);
    Ok(finish_report(report, outputs, concurrency, Some(file_size_bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fsops_threads_create_file_single_dir() {
        let dir = tempfile::tempdir().unwrap();
        let report = bench_fsops(&FsOpsParams {
            op: FsOp::CreateFile,
            concurrency: 4,
            layout: Layout::SingleDir,
            target_dir: dir.path().to_path_buf(),
            ops_per_worker: 3,
            mode: WorkerMode::Threads,
        })
        .unwrap();
        assert_eq!(report.samples.len(), 12);
        assert!(!report.partial);
        // All files landed in the one shared directory.
        let count = std::fs::read_dir(dir.path().join("shared")).unwrap().count();
        assert_eq!(count, 12);
    }

    #[test]
    fn fsops_many_dirs_precreates_per_worker_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let report = bench_fsops(&FsOpsParams {
            op: FsOp::CreateDir,
            concurrency: 3,
            layout: Layout::ManyDirs,
            target_dir: dir.path().to_path_buf(),
            ops_per_worker: 2,
            mode: WorkerMode::Threads,
        })
        .unwrap();
        assert_eq!(report.samples.len(), 6);
        for i in 0..3 {
            let sub = dir.path().join(format!("w{i}"));
            assert!(sub.is_dir());
            assert_eq!(std::fs::read_dir(&sub).unwrap().count(), 2);
        }
    }

    #[test]
    fn single_worker_throughput_is_size_over_elapsed() {
        let dir = tempfile::tempdir().unwrap();
        let size = 10u64 << 20;
        let report = bench_readwrite(
            size,
            1,
            RwMode::Read,
            crate::executor::DEFAULT_BLOCK_BYTES,
            dir.path(),
            &WorkerMode::Threads,
        )
        .unwrap();
        let window_s = report.derived["window_s"];
        let mbps = report.derived["aggregate_mb_per_s"];
        assert!((mbps - size as f64 / window_s / 1e6).abs() < 1e-6);
    }

    #[test]
    fn readwrite_produces_identical_output_copy() {
        let dir = tempfile::tempdir().unwrap();
        let size = 1u64 << 20;
        bench_readwrite(
            size,
            2,
            RwMode::ReadWrite,
            crate::executor::DEFAULT_BLOCK_BYTES,
            dir.path(),
            &WorkerMode::Threads,
        )
        .unwrap();
        for i in 0..2 {
            let a = std::fs::read(dir.path().join("rw").join(format!("in-{i}"))).unwrap();
            let b = std::fs::read(dir.path().join("rw").join(format!("out-{i}"))).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn worker_output_round_trips_through_stdout_encoding() {
        let out = WorkerOutput {
            per_op_ms: vec![0.5, 1.25],
            start_ms: 100,
            end_ms: 200,
        };
        let mut buf = Vec::new();
        out.write_to(&mut buf).unwrap();
        let back = WorkerOutput::parse_from(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, out);
    }

    #[test]
    fn aggregate_rate_identity_at_reported_scale() {
        // 16384 workers each taking 404 s per create works out to about
        // 40.6 creates/s in aggregate.
        let rate: f64 = 16_384.0 / 404.0;
        assert!((rate - 40.6).abs() < 0.05, "{rate}");
    }

    #[test]
    fn invoke_script_runs_from_target_dir() {
        let dir = tempfile::tempdir().unwrap();
        let report = bench_fsops(&FsOpsParams {
            op: FsOp::InvokeScript,
            concurrency: 2,
            layout: Layout::ManyDirs,
            target_dir: dir.path().to_path_buf(),
            ops_per_worker: 1,
            mode: WorkerMode::Threads,
        })
        .unwrap();
        assert_eq!(report.samples.len(), 2);
    }
}
