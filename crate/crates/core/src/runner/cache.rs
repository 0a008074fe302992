//! Size-bounded LRU store of dataset blobs shared by worker processes.
//!
//! Layout under the root: `index.json` (entries and a logical clock),
//! `blobs/<key>.bin`, and `.lock`, which serializes every index update across
//! processes.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt cache index {0}")]
    CorruptIndex(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub size: u64,
    /// Logical timestamp of the last store or hit.
    pub last_used: u64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct CacheIndex {
    clock: u64,
    entries: BTreeMap<String, CacheEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
    /// Not cached: the cache is disabled or the blob exceeds its capacity.
    Bypass,
}

impl CacheStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CacheStatus::Hit => "hit",
            CacheStatus::Miss => "miss",
            CacheStatus::Bypass => "bypass",
        }
    }
}

#[derive(Debug)]
pub struct CacheFetch {
    pub bytes: Vec<u8>,
    pub status: CacheStatus,
    /// Blob location, absent when bypassed.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct DataCache {
    root: PathBuf,
    capacity: u64,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct LockGuard(File);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

impl DataCache {
    pub fn new(root: impl Into<PathBuf>, capacity: u64) -> Self {
        DataCache {
            root: root.into(),
            capacity,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.json")
    }

    pub fn blob_path(&self, key: &str) -> PathBuf {
        self.root.join("blobs").join(format!("{key}.bin"))
    }

    fn lock(&self) -> Result<LockGuard, CacheError> {
        let blobs = self.root.join("blobs");
        fs::create_dir_all(&blobs).map_err(io_err(&blobs))?;
        let path = self.root.join(".lock");
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.lock().map_err(io_err(&path))?;
        Ok(LockGuard(f))
    }

    fn read_index(&self) -> Result<CacheIndex, CacheError> {
        let path = self.index_path();
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|_| CacheError::CorruptIndex(path)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(CacheIndex::default()),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn write_index(&self, index: &CacheIndex) -> Result<(), CacheError> {
        let path = self.index_path();
        let text = serde_json::to_string_pretty(index).expect("index serializes");
        crate::pipeline::write_atomic(&path, text.as_bytes()).map_err(io_err(&path))
    }

    /// Current entries, for inspection.
    pub fn entries(&self) -> Result<BTreeMap<String, CacheEntry>, CacheError> {
        let _guard = self.lock()?;
        Ok(self.read_index()?.entries)
    }

    pub fn total_size(&self) -> Result<u64, CacheError> {
        Ok(self.entries()?.values().map(|e| e.size).sum())
    }

    /// Returns the blob stored under `key`, building and storing it on a miss.
    /// The lock is released while `build` runs, so two processes missing on
    /// the same key may both build it; the second store is a no-op.
    pub fn fetch_or_build<E>(
        &self,
        key: &str,
        build: impl FnOnce() -> Result<Vec<u8>, E>,
    ) -> Result<Result<CacheFetch, E>, CacheError> {
        if self.capacity == 0 {
            return Ok(build().map(|bytes| CacheFetch {
                bytes,
                status: CacheStatus::Bypass,
                path: None,
            }));
        }
        {
            let _guard = self.lock()?;
            let mut index = self.read_index()?;
            if index.entries.contains_key(key) {
                let path = self.blob_path(key);
                match fs::read(&path) {
                    Ok(bytes) => {
                        index.clock += 1;
                        let clock = index.clock;
                        if let Some(e) = index.entries.get_mut(key) {
                            e.last_used = clock;
                        }
                        self.write_index(&index)?;
                        return Ok(Ok(CacheFetch {
                            bytes,
                            status: CacheStatus::Hit,
                            path: Some(path),
                        }));
                    }
                    Err(_) => {
                        log::warn!("cache entry {key} lost its blob; rebuilding");
                        index.entries.remove(key);
                        self.write_index(&index)?;
                    }
                }
            }
        }
        let bytes = match build() {
            Ok(b) => b,
            Err(e) => return Ok(Err(e)),
        };
        let size = bytes.len() as u64;
        if size > self.capacity {
            log::warn!(
                "blob {key} ({size} bytes) exceeds the cache capacity ({} bytes); not cached",
                self.capacity
            );
            return Ok(Ok(CacheFetch {
                bytes,
                status: CacheStatus::Bypass,
                path: None,
            }));
        }
        let _guard = self.lock()?;
        let mut index = self.read_index()?;
        index.clock += 1;
        let clock = index.clock;
        let path = self.blob_path(key);
        if !index.entries.contains_key(key) {
            crate::pipeline::write_atomic(&path, &bytes).map_err(io_err(&path))?;
        }
        index.entries.insert(key.to_string(), CacheEntry { size, last_used: clock });
        self.evict(&mut index, key)?;
        self.write_index(&index)?;
        Ok(Ok(CacheFetch {
            bytes,
            status: CacheStatus::Miss,
            path: Some(path),
        }))
    }

    /// Drops least recently used entries other than `keep` until the total
    /// size fits the capacity.
    fn evict(&self, index: &mut CacheIndex, keep: &str) -> Result<(), CacheError> {
        let mut total: u64 = index.entries.values().map(|e| e.size).sum();
        while total > self.capacity {
            let victim = index
                .entries
                .iter()
                .filter(|(k, _)| k.as_str() != keep)
                .min_by_key(|(k, e)| (e.last_used, k.to_string()))
                .map(|(k, _)| k.clone());
            let Some(victim) = victim else { break };
            let entry = index.entries.remove(&victim).expect("victim exists");
            total -= entry.size;
            let path = self.blob_path(&victim);
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&path)(e)),
            }
            log::debug!("evicted cache entry {victim} ({} bytes)", entry.size);
        }
        Ok(())
    }
}
