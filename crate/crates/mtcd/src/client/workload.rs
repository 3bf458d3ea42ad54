//! Workload files: one task record per line, `#` for comments.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::protocol::TaskDescriptor;

/// Ordered task list with file-level metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub name: String,
    pub created_at: String,
    pub tasks: Vec<TaskDescriptor>,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        source: serde_json::Error,
    },
    #[error("line {line}: invalid task: {reason}")]
    Invalid { line: usize, reason: String },
    #[error("line {line}: duplicate task id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parse a workload file, preserving task order.
pub fn load_workload(path: &Path) -> Result<Workload, WorkloadError> {
    let contents = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "workload".into());
    let mut tasks = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, raw) in contents.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let task: TaskDescriptor =
            serde_json::from_str(trimmed).map_err(|source| WorkloadError::Malformed { line, source })?;
        task.validate()
            .map_err(|reason| WorkloadError::Invalid { line, reason })?;
        if !seen.insert(task.task_id.clone()) {
            return Err(WorkloadError::DuplicateId {
                line,
                id: task.task_id,
            });
        }
        tasks.push(task);
    }
    Ok(Workload {
        name,
        created_at: format!("{}", crate::clock::wall_ms()),
        tasks,
    })
}

/// Serialize a workload back to its line-per-task form.
pub fn write_workload(path: &Path, workload: &Workload) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# workload {} ({} tasks)", workload.name, workload.tasks.len())?;
    for task in &workload.tasks {
        let line = serde_json::to_string(task).expect("task serializes");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Synthetic sleep workload: `task_length_s == 0` becomes a no-op fork.
pub fn sleep_workload(num_tasks: usize, task_length_s: f64, id_prefix: &str) -> Workload {
    let tasks = (0..num_tasks)
        .map(|i| {
            let mut t = TaskDescriptor::new(format!("{id_prefix}-{i:07}"), "/bin/true");
            if task_length_s > 0.0 {
                t.executable = "/bin/sleep".into();
                t.args = vec![format!("{task_length_s}")];
            }
            t
        })
        .collect();
    Workload {
        name: format!("{id_prefix}-sleep"),
        created_at: format!("{}", crate::clock::wall_ms()),
        tasks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tasks");
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_file_is_empty_workload() {
        let (_d, p) = write_tmp("");
        let w = load_workload(&p).unwrap();
        assert!(w.tasks.is_empty());
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let (_d, p) = write_tmp(
            "# header\n\n{\"task_id\":\"a\",\"executable\":\"/bin/true\"}\n  \n# tail\n",
        );
        let w = load_workload(&p).unwrap();
        assert_eq!(w.tasks.len(), 1);
        assert_eq!(w.tasks[0].task_id, "a");
    }

    #[test]
    fn three_lines_keep_file_order() {
        let (_d, p) = write_tmp(concat!(
            "{\"task_id\":\"t1\",\"executable\":\"/bin/true\"}\n",
            "{\"task_id\":\"t2\",\"executable\":\"/bin/true\",\"args\":[\"x\"]}\n",
            "{\"task_id\":\"t3\",\"executable\":\"/bin/sleep\",\"args\":[\"0\"]}\n",
        ));
        let w = load_workload(&p).unwrap();
        let ids: Vec<&str> = w.tasks.iter().map(|t| t.task_id.as_str()).collect();
        assert_eq!(ids, ["t1", "t2", "t3"]);
        assert_eq!(w.tasks[1].args, vec!["x"]);
    }

    #[test]
    fn missing_executable_names_the_line() {
        let (_d, p) = write_tmp(concat!(
            "{\"task_id\":\"t1\",\"executable\":\"/bin/true\"}\n",
            "{\"task_id\":\"t2\"}\n",
        ));
        match load_workload(&p).unwrap_err() {
            WorkloadError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_is_an_error() {
        let (_d, p) = write_tmp(concat!(
            "{\"task_id\":\"t1\",\"executable\":\"/bin/true\"}\n",
            "{\"task_id\":\"t1\",\"executable\":\"/bin/true\"}\n",
        ));
        match load_workload(&p).unwrap_err() {
            WorkloadError::DuplicateId { line, id } => {
                assert_eq!(line, 2);
                assert_eq!(id, "t1");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn workload_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.tasks");
        let w = sleep_workload(10, 0.5, "rt");
        write_workload(&path, &w).unwrap();
        let back = load_workload(&path).unwrap();
        assert_eq!(back.tasks, w.tasks);
    }

    #[test]
    fn sleep_workload_zero_uses_noop_fork() {
        let w = sleep_workload(3, 0.0, "z");
        assert!(w.tasks.iter().all(|t| t.executable == "/bin/true"));
        let w = sleep_workload(3, 0.25, "s");
        assert!(w.tasks.iter().all(|t| t.executable == "/bin/sleep"));
        assert_eq!(w.tasks[0].args, vec!["0.25"]);
    }
}
