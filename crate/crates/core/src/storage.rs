//! Lock-guarded JSON document persistence shared by every project store.
//!
//! Each document lives at a path with a zero-length `<path>.lock` sibling.
//! Mutation takes a per-path mutex inside the process and an exclusive
//! advisory lock on the sibling across processes, then commits by writing a
//! temp file in the same directory and renaming it over the original.
//! Multi-store transactions are not atomic: only single-path atomicity is
//! provided.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(30);
const RETRY_BACKOFF: Duration = Duration::from_millis(10);

/// A parsed on-disk document together with its schema version.
///
/// The version is read from a top-level `schema_version` integer when the
/// payload is a JSON object; documents without one are version 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreFile {
    pub path: PathBuf,
    pub schema_version: u64,
    pub payload: Value,
}

impl StoreFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Option<StoreFile>> {
        let path = path.as_ref();
        let Some(payload) = read_value(path)? else {
            return Ok(None);
        };
        Ok(Some(StoreFile {
            path: path.to_path_buf(),
            schema_version: schema_version_of(&payload),
            payload,
        }))
    }
}

fn schema_version_of(v: &Value) -> u64 {
    v.get("schema_version").and_then(Value::as_u64).unwrap_or(0)
}

/// Handle carrying the lock timeout; all stores go through one of these.
#[derive(Debug, Clone, Copy)]
pub struct FileStore {
    lock_timeout: Duration,
}

impl Default for FileStore {
    fn default() -> Self {
        FileStore {
            lock_timeout: DEFAULT_LOCK_TIMEOUT,
        }
    }
}

impl FileStore {
    pub fn with_lock_timeout(lock_timeout: Duration) -> Self {
        FileStore { lock_timeout }
    }

    pub fn lock_timeout(&self) -> Duration {
        self.lock_timeout
    }

    /// Read a typed document, returning `default` when the file is absent.
    pub fn read<T: DeserializeOwned>(&self, path: impl AsRef<Path>, default: T) -> Result<T> {
        read_store(path, default)
    }

    /// Apply `f` to the current document under both locks and commit the
    /// result. Nothing is written when `f` fails.
    pub fn update<T, R, F>(&self, path: impl AsRef<Path>, f: F) -> Result<R>
    where
        T: Serialize + DeserializeOwned + Default,
        F: FnOnce(&mut T) -> Result<R>,
    {
        let path = path.as_ref();
        let _guard = PathGuard::acquire(path, self.lock_timeout)?;
        let current = match read_value(path)? {
            Some(v) => Some(serde_json::from_value::<T>(v.clone()).map_err(|e| {
                Error::CorruptStore {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                }
            })?)
            .map(|t| (t, schema_version_of(&v))),
            None => None,
        };
        let (mut doc, old_version) = current.unwrap_or_else(|| (T::default(), 0));
        let out = f(&mut doc)?;
        let value = serde_json::to_value(&doc)?;
        let new_version = schema_version_of(&value);
        if new_version < old_version {
            return Err(Error::Validation(format!(
                "schema_version of {} would decrease from {old_version} to {new_version}",
                path.display()
            )));
        }
        commit(path, &value)?;
        Ok(out)
    }

    /// Transform the whole payload and return the committed value.
    pub fn atomic_update<T, F>(&self, path: impl AsRef<Path>, transform: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned + Default + Clone,
        F: FnOnce(T) -> T,
    {
        self.update(path, |doc: &mut T| {
            let next = transform(std::mem::take(doc));
            *doc = next.clone();
            Ok(next)
        })
    }

    /// Overwrite a document unconditionally (still lock-guarded).
    pub fn write<T: Serialize>(&self, path: impl AsRef<Path>, value: &T) -> Result<()> {
        let path = path.as_ref();
        let _guard = PathGuard::acquire(path, self.lock_timeout)?;
        commit(path, &serde_json::to_value(value)?)
    }
}

/// Read and parse `path`; absent files yield `default`, unparseable ones are
/// reported as [`Error::CorruptStore`] and never reinitialized.
pub fn read_store<T: DeserializeOwned>(path: impl AsRef<Path>, default: T) -> Result<T> {
    let path = path.as_ref();
    match read_value(path)? {
        None => Ok(default),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::CorruptStore {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }),
    }
}

fn read_value(path: &Path) -> Result<Option<Value>> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    serde_json::from_slice(&bytes)
        .map(Some)
        .map_err(|e| Error::CorruptStore {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Serialize a value the way every store document is laid out on disk:
/// pretty JSON, UTF-8, trailing newline.
pub fn to_document_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn commit(path: &Path, value: &Value) -> Result<()> {
    static TMP_SEQ: AtomicU64 = AtomicU64::new(0);
    let dir = parent_dir(path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(
        ".{name}.tmp.{}.{}",
        std::process::id(),
        TMP_SEQ.fetch_add(1, Ordering::Relaxed)
    ));
    let bytes = to_document_bytes(value)?;
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn lock_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".lock");
    PathBuf::from(s)
}

fn process_locks() -> &'static Mutex<HashMap<PathBuf, &'static Mutex<()>>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, &'static Mutex<()>>>> = OnceLock::new();
    LOCKS.get_or_init(Default::default)
}

/// Exclusive hold on a path (per-path mutex plus advisory lock on the
/// `.lock` sibling), released on drop.
pub struct PathGuard {
    _file: File,
    _local: std::sync::MutexGuard<'static, ()>,
}

impl PathGuard {
    pub fn acquire(path: &Path, timeout: Duration) -> Result<PathGuard> {
        let key = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
        // one leaked mutex per distinct path for the life of the process
        let slot: &'static Mutex<()> = {
            let mut map = process_locks().lock().unwrap_or_else(|p| p.into_inner());
            map.entry(key)
                .or_insert_with(|| Box::leak(Box::new(Mutex::new(()))))
        };
        let started = Instant::now();
        let local = loop {
            match slot.try_lock() {
                Ok(g) => break g,
                Err(std::sync::TryLockError::Poisoned(p)) => break p.into_inner(),
                Err(std::sync::TryLockError::WouldBlock) => {}
            }
            if started.elapsed() >= timeout {
                return Err(Error::LockTimeout {
                    path: path.to_path_buf(),
                    waited_ms: started.elapsed().as_millis(),
                });
            }
            std::thread::sleep(RETRY_BACKOFF);
        };

        let dir = parent_dir(path);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let lp = lock_path(path);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lp)
            .map_err(|e| Error::io(&lp, e))?;
        loop {
            match file.try_lock() {
                Ok(()) => break,
                Err(TryLockError::WouldBlock) => {}
                Err(TryLockError::Error(e)) => return Err(Error::io(&lp, e)),
            }
            if started.elapsed() >= timeout {
                return Err(Error::LockTimeout {
                    path: path.to_path_buf(),
                    waited_ms: started.elapsed().as_millis(),
                });
            }
            std::thread::sleep(RETRY_BACKOFF);
        }
        Ok(PathGuard {
            _file: file,
            _local: local,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use std::collections::BTreeMap;

    #[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
    struct Counter {
        #[serde(default)]
        schema_version: u64,
        #[serde(default)]
        n: u64,
        #[serde(default)]
        keys: BTreeMap<String, u64>,
    }

    #[test]
    fn absent_file_returns_default() {
        let dir = tempfile::tempdir().unwrap();
        let v: Value = read_store(dir.path().join("x.json"), serde_json::json!({})).unwrap();
        assert_eq!(v, serde_json::json!({}));
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("doc.json");
        let store = FileStore::default();
        let doc = Counter {
            schema_version: 1,
            n: 7,
            keys: [("a".to_string(), 3)].into(),
        };
        store.write(&p, &doc).unwrap();
        assert_eq!(store.read(&p, Counter::default()).unwrap(), doc);
        let raw = fs::read(&p).unwrap();
        assert_eq!(raw.last(), Some(&b'\n'));
        assert_eq!(fs::metadata(lock_path(&p)).unwrap().len(), 0);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("doc.json");
        FileStore::default()
            .write(&p, &Counter { n: 12345, ..Default::default() })
            .unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_store(&p, Counter::default()).unwrap_err();
        assert!(matches!(err, Error::CorruptStore { .. }), "{err}");
        let err = FileStore::default()
            .atomic_update(&p, |c: Counter| c)
            .unwrap_err();
        assert!(matches!(err, Error::CorruptStore { .. }));
        // never silently reinitialized
        assert_eq!(fs::read(&p).unwrap(), &bytes[..bytes.len() / 2]);
    }

    #[test]
    fn identity_transform_keeps_payload_and_rewrites() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("doc.json");
        let store = FileStore::default();
        let doc = Counter { n: 5, ..Default::default() };
        store.write(&p, &doc).unwrap();
        let before = fs::metadata(&p).unwrap().modified().unwrap();
        std::thread::sleep(Duration::from_millis(20));
        let after_doc = store.atomic_update(&p, |c: Counter| c).unwrap();
        assert_eq!(after_doc, doc);
        let after = fs::metadata(&p).unwrap().modified().unwrap();
        assert!(after > before);
    }

    #[test]
    fn failed_transform_leaves_prior_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("doc.json");
        let store = FileStore::default();
        store.write(&p, &Counter { n: 1, ..Default::default() }).unwrap();
        let res: Result<()> = store.update(&p, |c: &mut Counter| {
            c.n = 99;
            Err(Error::Validation("nope".into()))
        });
        assert!(res.is_err());
        assert_eq!(store.read(&p, Counter::default()).unwrap().n, 1);
    }

    #[test]
    fn orphaned_temp_file_does_not_affect_reads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("doc.json");
        let store = FileStore::default();
        store.write(&p, &Counter { n: 4, ..Default::default() }).unwrap();
        // a writer killed before rename leaves only its temp file behind
        fs::write(dir.path().join(".doc.json.tmp.999.0"), b"{\"n\": 100").unwrap();
        assert_eq!(store.read(&p, Counter::default()).unwrap().n, 4);
        store.atomic_update(&p, |mut c: Counter| {
            c.n += 1;
            c
        })
        .unwrap();
        assert_eq!(store.read(&p, Counter::default()).unwrap().n, 5);
    }

    #[test]
    fn schema_version_cannot_decrease() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("doc.json");
        let store = FileStore::default();
        store.write(&p, &Counter { schema_version: 2, ..Default::default() }).unwrap();
        let err = store
            .atomic_update(&p, |mut c: Counter| {
                c.schema_version = 1;
                c
            })
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert_eq!(StoreFile::load(&p).unwrap().unwrap().schema_version, 2);
    }

    #[test]
    fn concurrent_threads_serialize_increments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("counter.json");
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let p = p.clone();
                std::thread::spawn(move || {
                    let store = FileStore::default();
                    for _ in 0..25 {
                        store
                            .atomic_update(&p, |mut c: Counter| {
                                c.n += 1;
                                c
                            })
                            .unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(read_store(&p, Counter::default()).unwrap().n, 100);
    }

    #[test]
    fn contended_lock_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("doc.json");
        let holder = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(lock_path(&p))
            .unwrap();
        holder.lock().unwrap();
        let store = FileStore::with_lock_timeout(Duration::from_millis(50));
        let err = store.atomic_update(&p, |c: Counter| c).unwrap_err();
        assert!(matches!(err, Error::LockTimeout { .. }), "{err}");
        holder.unlock().unwrap();
        store.atomic_update(&p, |c: Counter| c).unwrap();
    }
}
