//! Node-local data cache and task sandboxes.
//!
//! Static inputs are copied once into `<root>/static/<key>` and linked into
//! each task sandbox; the key digests both the source URI and the file
//! content, so a mutated source never serves stale bytes. Warm lookups cost
//! one `stat`: the full content hash is only recomputed when the source's
//! (length, mtime) fingerprint changed. Dynamic inputs are copied fresh into
//! the per-task sandbox every time and disappear when the task finalizes.
//!
//! Concurrent requests for the same URI are deduplicated: one caller stages,
//! the rest wait on a condvar.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::SystemTime;

use sha2::{Digest, Sha256};

use crate::clock::monotonic_ms;
use crate::protocol::DataRef;

use super::runner::{copy_stream, StageError, DEFAULT_BLOCK_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Fingerprint {
    len: u64,
    mtime: Option<SystemTime>,
}

impl Fingerprint {
    fn of(path: &Path) -> Result<Self, StageError> {
        let meta = std::fs::metadata(path).map_err(|e| StageError::source(path, e))?;
        Ok(Self {
            len: meta.len(),
            mtime: meta.modified().ok(),
        })
    }
}

#[derive(Debug)]
struct StaticEntry {
    key: String,
    local_path: PathBuf,
    size_bytes: u64,
    fingerprint: Fingerprint,
    last_used_ms: u64,
    pins: u32,
}

#[derive(Debug, Default)]
struct CacheBook {
    entries: HashMap<String, StaticEntry>,
    uri_index: HashMap<String, String>,
    staging: std::collections::HashSet<String>,
    /// (task, key) pins so finalization releases exactly what was taken.
    pins_by_task: HashMap<String, Vec<String>>,
    dynamic_by_task: HashMap<String, u64>,
    total_bytes: u64,
}

pub struct DataCache {
    root: PathBuf,
    capacity_bytes: u64,
    book: Mutex<CacheBook>,
    staged: Condvar,
    copies: AtomicU64,
}

impl DataCache {
    pub fn new(root: impl Into<PathBuf>, capacity_bytes: u64) -> std::io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("static"))?;
        std::fs::create_dir_all(root.join("tasks"))?;
        Ok(Self {
            root,
            capacity_bytes,
            book: Mutex::new(CacheBook::default()),
            staged: Condvar::new(),
            copies: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of actual data copies performed; concurrent hits on one static
    /// ref must not increase this more than once.
    pub fn copies_performed(&self) -> u64 {
        self.copies.load(Ordering::SeqCst)
    }

    pub fn total_bytes(&self) -> u64 {
        self.book.lock().unwrap_or_else(|e| e.into_inner()).total_bytes
    }

    pub fn sandbox_dir(&self, task_id: &str) -> PathBuf {
        self.root.join("tasks").join(task_id)
    }

    pub fn create_sandbox(&self, task_id: &str) -> Result<PathBuf, StageError> {
        let dir = self.sandbox_dir(task_id);
        std::fs::create_dir_all(&dir).map_err(StageError::Io)?;
        Ok(dir)
    }

    /// Fetch a static input, copying it into the cache at most once.
    pub fn get_static(&self, data_ref: &DataRef, task_id: &str) -> Result<PathBuf, StageError> {
        let uri = &data_ref.source_uri;
        loop {
            let mut book = self.book.lock().unwrap_or_else(|e| e.into_inner());
            if book.staging.contains(uri) {
                book = self
                    .staged
                    .wait(book)
                    .unwrap_or_else(|e| e.into_inner());
                drop(book);
                continue;
            }
            if let Some(key) = book.uri_index.get(uri).cloned() {
                let fingerprint = Fingerprint::of(Path::new(uri))?;
                let entry = book.entries.get_mut(&key).expect("indexed entry exists");
                if entry.fingerprint == fingerprint {
                    entry.last_used_ms = monotonic_ms();
                    entry.pins += 1;
                    let path = entry.local_path.clone();
                    book.pins_by_task
                        .entry(task_id.to_string())
                        .or_default()
                        .push(key);
                    return Ok(path);
                }
                // Source changed under us; re-stage below.
            }
            book.staging.insert(uri.clone());
            drop(book);
            let staged = self.stage_static(data_ref, task_id);
            let mut book = self.book.lock().unwrap_or_else(|e| e.into_inner());
            book.staging.remove(uri);
            self.staged.notify_all();
            return match staged {
                Ok(prepared) => Ok(self.commit_static(&mut book, prepared, task_id)),
                Err(e) => Err(e),
            };
        }
    }

    /// Copy + hash in one pass into a temporary file; the lock is not held.
    fn stage_static(&self, data_ref: &DataRef, task_id: &str) -> Result<PreparedEntry, StageError> {
        let src_path = Path::new(&data_ref.source_uri);
        let fingerprint = Fingerprint::of(src_path)?;
        let mut src = std::fs::File::open(src_path).map_err(|e| StageError::source(src_path, e))?;
        let tmp_path = self
            .root
            .join("static")
            .join(format!(".staging-{task_id}-{}", monotonic_ms()));
        let mut hasher = Sha256::new();
        let bytes = {
            let mut dst = std::fs::File::create(&tmp_path).map_err(StageError::Io)?;
            let mut tee = HashingWriter {
                inner: &mut dst,
                hasher: &mut hasher,
            };
            let (bytes, _) = copy_stream(&mut src, &mut tee, DEFAULT_BLOCK_BYTES)?;
            bytes
        };
        if bytes != fingerprint.len {
            let _ = std::fs::remove_file(&tmp_path);
            return Err(StageError::ShortCopy {
                expected: fingerprint.len,
                copied: bytes,
            });
        }
        self.copies.fetch_add(1, Ordering::SeqCst);
        let content_hash: [u8; 32] = hasher.finalize().into();
        // The key digests (uri, content hash): distinct sources never
        // collide, and mutated content maps to a fresh entry.
        let mut key_hasher = Sha256::new();
        key_hasher.update(data_ref.source_uri.as_bytes());
        key_hasher.update([0u8]);
        key_hasher.update(content_hash);
        let key = hex(&key_hasher.finalize());
        Ok(PreparedEntry {
            uri: data_ref.source_uri.clone(),
            key,
            tmp_path,
            size_bytes: bytes,
            fingerprint,
        })
    }

    fn commit_static(
        &self,
        book: &mut CacheBook,
        prepared: PreparedEntry,
        task_id: &str,
    ) -> PathBuf {
        let PreparedEntry {
            uri,
            key,
            tmp_path,
            size_bytes,
            fingerprint,
        } = prepared;
        let final_path = self.root.join("static").join(&key);
        if let Some(existing) = book.entries.get_mut(&key) {
            // Identical content already cached (e.g. the source was touched
            // but unchanged); keep the existing file.
            let _ = std::fs::remove_file(&tmp_path);
            existing.fingerprint = fingerprint;
            existing.last_used_ms = monotonic_ms();
            existing.pins += 1;
        } else {
            // Rename can only fail across filesystems; the tmp file lives in
            // the same directory.
            std::fs::rename(&tmp_path, &final_path).expect("rename within cache dir");
            book.total_bytes += size_bytes;
            book.entries.insert(
                key.clone(),
                StaticEntry {
                    key: key.clone(),
                    local_path: final_path.clone(),
                    size_bytes,
                    fingerprint,
                    last_used_ms: monotonic_ms(),
                    pins: 1,
                },
            );
        }
        book.uri_index.insert(uri, key.clone());
        book.pins_by_task
            .entry(task_id.to_string())
            .or_default()
            .push(key.clone());
        self.evict_to_capacity(book);
        book.entries[&key].local_path.clone()
    }

    /// Copy a dynamic input into the task sandbox; every request copies.
    pub fn stage_dynamic(
        &self,
        data_ref: &DataRef,
        task_id: &str,
        dest: &Path,
    ) -> Result<PathBuf, StageError> {
        let src_path = Path::new(&data_ref.source_uri);
        let mut src = std::fs::File::open(src_path).map_err(|e| StageError::source(src_path, e))?;
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent).map_err(StageError::Io)?;
        }
        let mut dst = std::fs::File::create(dest).map_err(StageError::Io)?;
        let (bytes, _) = copy_stream(&mut src, &mut dst, DEFAULT_BLOCK_BYTES)?;
        self.copies.fetch_add(1, Ordering::SeqCst);
        let mut book = self.book.lock().unwrap_or_else(|e| e.into_inner());
        *book.dynamic_by_task.entry(task_id.to_string()).or_default() += bytes;
        book.total_bytes += bytes;
        self.evict_to_capacity(&mut book);
        Ok(dest.to_path_buf())
    }

    /// Drop the task's sandbox, its dynamic bytes, and its static pins.
    pub fn task_finalized(&self, task_id: &str) {
        let mut book = self.book.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(bytes) = book.dynamic_by_task.remove(task_id) {
            book.total_bytes = book.total_bytes.saturating_sub(bytes);
        }
        if let Some(keys) = book.pins_by_task.remove(task_id) {
            for key in keys {
                if let Some(entry) = book.entries.get_mut(&key) {
                    entry.pins = entry.pins.saturating_sub(1);
                }
            }
        }
        drop(book);
        let _ = std::fs::remove_dir_all(self.sandbox_dir(task_id));
    }

    fn evict_to_capacity(&self, book: &mut CacheBook) {
        while book.total_bytes > self.capacity_bytes {
            let victim = book
                .entries
                .values()
                .filter(|e| e.pins == 0)
                .min_by_key(|e| e.last_used_ms)
                .map(|e| e.key.clone());
            let Some(key) = victim else {
                log::warn!(
                    "cache over capacity ({} > {}) but every entry is pinned",
                    book.total_bytes,
                    self.capacity_bytes
                );
                return;
            };
            let entry = book.entries.remove(&key).expect("victim exists");
            book.total_bytes = book.total_bytes.saturating_sub(entry.size_bytes);
            book.uri_index.retain(|_, k| *k != key);
            let _ = std::fs::remove_file(&entry.local_path);
            log::debug!("evicted {} ({} bytes)", entry.key, entry.size_bytes);
        }
    }

    /// Cached static keys, least recently used first (diagnostics/tests).
    pub fn static_keys_lru(&self) -> Vec<String> {
        let book = self.book.lock().unwrap_or_else(|e| e.into_inner());
        let mut v: Vec<(&u64, &String)> = book
            .entries
            .values()
            .map(|e| (&e.last_used_ms, &e.key))
            .collect();
        v.sort();
        v.into_iter().map(|(_, k)| k.clone()).collect()
    }
}

struct PreparedEntry {
    uri: String,
    key: String,
    tmp_path: PathBuf,
    size_bytes: u64,
    fingerprint: Fingerprint,
}

struct HashingWriter<'a, W: std::io::Write> {
    inner: &'a mut W,
    hasher: &'a mut Sha256,
}

impl<W: std::io::Write> std::io::Write for HashingWriter<'_, W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::DataKind;
    use std::sync::Arc;

    fn data_ref(uri: &Path, kind: DataKind) -> DataRef {
        DataRef {
            logical_name: "in".into(),
            source_uri: uri.to_string_lossy().into_owned(),
            kind,
            size_hint_bytes: None,
        }
    }

    fn write_file(path: &Path, contents: &[u8]) {
        std::fs::write(path, contents).unwrap();
    }

    #[test]
    fn static_hit_serves_identical_bytes_without_second_copy() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.bin");
        write_file(&src, b"hello static world");
        let cache = DataCache::new(dir.path().join("cache"), 1 << 20).unwrap();
        let r = data_ref(&src, DataKind::Static);

        let p1 = cache.get_static(&r, "t1").unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), b"hello static world");
        assert_eq!(cache.copies_performed(), 1);

        let p2 = cache.get_static(&r, "t2").unwrap();
        assert_eq!(p1, p2);
        assert_eq!(cache.copies_performed(), 1);
    }

    #[test]
    fn mutated_source_is_restaged() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.bin");
        write_file(&src, b"version one");
        let cache = DataCache::new(dir.path().join("cache"), 1 << 20).unwrap();
        let r = data_ref(&src, DataKind::Static);

        let p1 = cache.get_static(&r, "t1").unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), b"version one");
        write_file(&src, b"version two!"); // different length forces a restage
        let p2 = cache.get_static(&r, "t2").unwrap();
        assert_eq!(std::fs::read(&p2).unwrap(), b"version two!");
        assert_ne!(p1, p2);
        assert_eq!(cache.copies_performed(), 2);
    }

    #[test]
    fn concurrent_static_requests_copy_once() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("big.bin");
        write_file(&src, &vec![7u8; 4 << 20]);
        let cache = Arc::new(DataCache::new(dir.path().join("cache"), 64 << 20).unwrap());
        let r = data_ref(&src, DataKind::Static);

        let mut handles = Vec::new();
        for i in 0..8 {
            let cache = Arc::clone(&cache);
            let r = r.clone();
            handles.push(std::thread::spawn(move || {
                cache.get_static(&r, &format!("t{i}")).unwrap()
            }));
        }
        let paths: Vec<PathBuf> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert!(paths.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(cache.copies_performed(), 1);
    }

    #[test]
    fn dynamic_requests_always_copy() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("dyn.bin");
        write_file(&src, b"dynamic data");
        let cache = DataCache::new(dir.path().join("cache"), 1 << 20).unwrap();
        let r = data_ref(&src, DataKind::Dynamic);

        let s1 = cache.create_sandbox("t1").unwrap();
        let s2 = cache.create_sandbox("t2").unwrap();
        cache.stage_dynamic(&r, "t1", &s1.join("in")).unwrap();
        cache.stage_dynamic(&r, "t2", &s2.join("in")).unwrap();
        assert_eq!(cache.copies_performed(), 2);
    }

    #[test]
    fn lru_static_entry_evicted_at_capacity() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str, bytes: usize| {
            let p = dir.path().join(name);
            write_file(&p, &vec![1u8; bytes]);
            p
        };
        let a = mk("a", 400);
        let b = mk("b", 400);
        let c = mk("c", 400);
        let cache = DataCache::new(dir.path().join("cache"), 1000).unwrap();

        let pa = cache.get_static(&data_ref(&a, DataKind::Static), "t1").unwrap();
        cache.task_finalized("t1"); // unpin so eviction can touch it
        std::thread::sleep(std::time::Duration::from_millis(2));
        cache.get_static(&data_ref(&b, DataKind::Static), "t2").unwrap();
        cache.task_finalized("t2");
        std::thread::sleep(std::time::Duration::from_millis(2));
        // Touch `a` so `b` becomes the least recently used entry.
        cache.get_static(&data_ref(&a, DataKind::Static), "t3").unwrap();
        cache.task_finalized("t3");
        std::thread::sleep(std::time::Duration::from_millis(2));
        cache.get_static(&data_ref(&c, DataKind::Static), "t4").unwrap();
        cache.task_finalized("t4");

        assert!(cache.total_bytes() <= 1000);
        assert!(pa.exists(), "recently used entry must survive");
        // `b` was evicted: fetching it again costs a new copy.
        let before = cache.copies_performed();
        cache.get_static(&data_ref(&b, DataKind::Static), "t5").unwrap();
        assert_eq!(cache.copies_performed(), before + 1);
    }

    #[test]
    fn pinned_entries_survive_eviction_pressure() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        write_file(&a, &vec![1u8; 800]);
        let b = dir.path().join("b");
        write_file(&b, &vec![2u8; 800]);
        let cache = DataCache::new(dir.path().join("cache"), 1000).unwrap();
        let pa = cache.get_static(&data_ref(&a, DataKind::Static), "t1").unwrap();
        // t1 still running: `a` pinned. Staging `b` overflows capacity but
        // must not remove the pinned file.
        cache.get_static(&data_ref(&b, DataKind::Static), "t2").unwrap();
        assert!(pa.exists());
        assert_eq!(std::fs::read(&pa).unwrap(), vec![1u8; 800]);
    }

    #[test]
    fn missing_source_is_staging_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DataCache::new(dir.path().join("cache"), 1 << 20).unwrap();
        let r = data_ref(&dir.path().join("nope"), DataKind::Static);
        assert!(matches!(
            cache.get_static(&r, "t1").unwrap_err(),
            StageError::SourceMissing(_)
        ));
    }

    #[test]
    fn task_finalized_removes_sandbox_and_dynamic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("d");
        write_file(&src, b"once");
        let cache = DataCache::new(dir.path().join("cache"), 1 << 20).unwrap();
        let sandbox = cache.create_sandbox("t1").unwrap();
        cache
            .stage_dynamic(&data_ref(&src, DataKind::Dynamic), "t1", &sandbox.join("d"))
            .unwrap();
        assert!(cache.total_bytes() > 0);
        cache.task_finalized("t1");
        assert_eq!(cache.total_bytes(), 0);
        assert!(!sandbox.exists());
    }
}
