//! Append-only completion cache.
//!
//! The data file is a sequence of records, each a decimal byte length on its
//! own line followed by that many bytes of JSON and a newline. A side index
//! (`<data>.idx`) holds one `key<TAB>offset<TAB>length` line per record and is
//! rebuilt from the data file whenever it is missing or out of date.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{BackendError, CacheKey, CompletionRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: CacheKey,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub prompt: String,
    pub completion: String,
}

impl CacheRecord {
    pub fn new(req: &CompletionRequest, completion: &str) -> Self {
        Self {
            key: req.cache_key(),
            model_id: req.model_id.clone(),
            temperature: req.temperature,
            max_output_tokens: req.max_output_tokens,
            stop_sequences: req.stop_sequences.clone(),
            prompt: req.prompt.clone(),
            completion: completion.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: usize,
    pub data_bytes: u64,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    offset: u64,
    len: u64,
}

struct Inner {
    index: HashMap<String, Slot>,
    order: Vec<String>,
    end: u64,
}

pub struct ResponseCache {
    path: PathBuf,
    index_path: PathBuf,
    inner: Mutex<Inner>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Cache(format!("{}: {e}", path.display()))
}

fn index_path_for(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

impl ResponseCache {
    /// Opens (or creates) the cache at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let index_path = index_path_for(&path);
        let data_len = match std::fs::metadata(&path) {
            Ok(m) => m.len(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(io_err(&path, e)),
        };
        let inner = match read_index(&index_path, data_len) {
            Some(inner) => inner,
            None => {
                let inner = scan(&path)?;
                write_index(&index_path, &inner)?;
                inner
            }
        };
        Ok(Self {
            path,
            index_path,
            inner: Mutex::new(inner),
        })
    }

    /// Opens an existing cache; unlike [`ResponseCache::open`] a missing file
    /// is an error.
    pub fn open_existing(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(io_err(path, "cache file does not exist"));
        }
        Self::open(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.inner.lock().unwrap().index.contains_key(key.as_str())
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.inner.lock().unwrap();
        CacheStats {
            entries: inner.index.len(),
            data_bytes: inner.end,
        }
    }

    /// Keys in insertion order.
    pub fn keys(&self) -> Vec<CacheKey> {
        self.inner
            .lock()
            .unwrap()
            .order
            .iter()
            .cloned()
            .map(CacheKey)
            .collect()
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheRecord>, BackendError> {
        let slot = match self.inner.lock().unwrap().index.get(key.as_str()) {
            Some(s) => *s,
            None => return Ok(None),
        };
        let mut f = File::open(&self.path).map_err(|e| io_err(&self.path, e))?;
        f.seek(SeekFrom::Start(slot.offset))
            .map_err(|e| io_err(&self.path, e))?;
        let mut buf = vec![0u8; slot.len as usize];
        f.read_exact(&mut buf).map_err(|e| io_err(&self.path, e))?;
        let rec: CacheRecord =
            serde_json::from_slice(&buf).map_err(|e| io_err(&self.path, e))?;
        Ok(Some(rec))
    }

    /// Appends a record unless its key is already present. Returns whether the
    /// record was written.
    pub fn put(&self, rec: &CacheRecord) -> Result<bool, BackendError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.index.contains_key(rec.key.as_str()) {
            return Ok(false);
        }
        let json = serde_json::to_vec(rec).map_err(|e| io_err(&self.path, e))?;
        let header = format!("{}\n", json.len());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| io_err(&self.path, e))?;
        let mut buf = Vec::with_capacity(header.len() + json.len() + 1);
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&json);
        buf.push(b'\n');
        f.write_all(&buf).map_err(|e| io_err(&self.path, e))?;
        f.flush().map_err(|e| io_err(&self.path, e))?;

        let slot = Slot {
            offset: inner.end + header.len() as u64,
            len: json.len() as u64,
        };
        inner.end += buf.len() as u64;
        inner.index.insert(rec.key.0.clone(), slot);
        inner.order.push(rec.key.0.clone());

        let mut idx = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.index_path)
            .map_err(|e| io_err(&self.index_path, e))?;
        writeln!(idx, "{}\t{}\t{}", rec.key, slot.offset, slot.len)
            .map_err(|e| io_err(&self.index_path, e))?;
        Ok(true)
    }

    /// All records in insertion order.
    pub fn records(&self) -> Result<Vec<CacheRecord>, BackendError> {
        self.keys()
            .iter()
            .map(|k| self.get(k).map(|r| r.expect("indexed key is present")))
            .collect()
    }

    /// Rewrites the cache keeping only `keep`; returns the number of records
    /// removed. The rewrite goes through a temporary file and a rename.
    pub fn prune(&self, keep: &HashSet<CacheKey>) -> Result<usize, BackendError> {
        let records = self.records()?;
        let tmp = {
            let mut s = self.path.as_os_str().to_owned();
            s.push(".tmp");
            PathBuf::from(s)
        };
        let _ = std::fs::remove_file(&tmp);
        let _ = std::fs::remove_file(index_path_for(&tmp));
        let fresh = ResponseCache::open(&tmp)?;
        let mut removed = 0;
        for rec in &records {
            if keep.contains(&rec.key) {
                fresh.put(rec)?;
            } else {
                removed += 1;
            }
        }
        let mut inner = self.inner.lock().unwrap();
        std::fs::rename(&tmp, &self.path).map_err(|e| io_err(&self.path, e))?;
        std::fs::rename(index_path_for(&tmp), &self.index_path)
            .map_err(|e| io_err(&self.index_path, e))?;
        *inner = fresh.inner.into_inner().unwrap();
        Ok(removed)
    }
}

fn scan(path: &Path) -> Result<Inner, BackendError> {
    let mut inner = Inner {
        index: HashMap::new(),
        order: Vec::new(),
        end: 0,
    };
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(inner),
        Err(e) => return Err(io_err(path, e)),
    };
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;
    loop {
        let mut header = String::new();
        let n = reader.read_line(&mut header).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        let len: u64 = header
            .trim_end()
            .parse()
            .map_err(|_| io_err(path, format!("bad record header at byte {offset}")))?;
        let mut buf = vec![0u8; len as usize + 1];
        reader
            .read_exact(&mut buf)
            .map_err(|_| io_err(path, format!("truncated record at byte {offset}")))?;
        if buf.pop() != Some(b'\n') {
            return Err(io_err(path, format!("record at byte {offset} not newline-terminated")));
        }
        #[derive(Deserialize)]
        struct KeyOnly {
            key: String,
        }
        let k: KeyOnly = serde_json::from_slice(&buf).map_err(|e| io_err(path, e))?;
        let slot = Slot {
            offset: offset + n as u64,
            len,
        };
        if !inner.index.contains_key(&k.key) {
            inner.order.push(k.key.clone());
            inner.index.insert(k.key, slot);
        }
        offset += n as u64 + len + 1;
    }
    inner.end = offset;
    Ok(inner)
}

fn read_index(path: &Path, data_len: u64) -> Option<Inner> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut inner = Inner {
        index: HashMap::new(),
        order: Vec::new(),
        end: 0,
    };
    for line in text.lines() {
        let mut parts = line.split('\t');
        let key = parts.next()?.to_string();
        let offset: u64 = parts.next()?.parse().ok()?;
        let len: u64 = parts.next()?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        inner.end = inner.end.max(offset + len + 1);
        if !inner.index.contains_key(&key) {
            inner.order.push(key.clone());
            inner.index.insert(key, Slot { offset, len });
        }
    }
    (inner.end == data_len).then_some(inner)
}

fn write_index(path: &Path, inner: &Inner) -> Result<(), BackendError> {
    let mut out = String::new();
    for key in &inner.order {
        let s = inner.index[key];
        out.push_str(&format!("{key}\t{}\t{}\n", s.offset, s.len));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}
