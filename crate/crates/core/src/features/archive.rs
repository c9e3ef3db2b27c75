//! On-disk feature archive.
//!
//! A directory of shard files plus `index.json`. Each record in a shard is
//!
//! ```text
//! u32 id_len | id (UTF-8) | u32 T | u32 F | T*F f32 (row-major) | u32 crc32
//! ```
//!
//! all little-endian, with the CRC covering every preceding byte of the
//! record. The index maps utterance id to `{shard, offset}`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureMatrix};

const INDEX_FILE: &str = "index.json";
const MAX_ID_LEN: u32 = 1 << 16;
pub const DEFAULT_SHARD_LIMIT: u64 = 256 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub shard: String,
    pub offset: u64,
}

pub(crate) fn encode_record(id: &str, m: &FeatureMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + id.len() + m.as_slice().len() * 4);
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id.as_bytes());
    buf.extend_from_slice(&(m.n_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.n_bins() as u32).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, FeatureError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| FeatureError::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

struct Header {
    id: String,
    n_frames: usize,
    n_bins: usize,
    raw: Vec<u8>,
}

fn read_header(
    r: &mut impl Read,
    path: &Path,
    offset: u64,
    file_len: u64,
) -> Result<Header, FeatureError> {
    let corrupt = |reason: &str| FeatureError::Corrupt {
        path: path.to_path_buf(),
        offset,
        reason: reason.into(),
    };
    let id_len = read_u32(r, path)?;
    if id_len > MAX_ID_LEN {
        return Err(corrupt("id length out of range"));
    }
    let mut id = vec![0u8; id_len as usize];
    r.read_exact(&mut id)
        .map_err(|e| FeatureError::io(path, e))?;
    let n_frames = read_u32(r, path)?;
    let n_bins = read_u32(r, path)?;
    let payload = u64::from(n_frames) * u64::from(n_bins) * 4;
    if offset + 16 + u64::from(id_len) + payload > file_len {
        return Err(corrupt("record extends past end of shard"));
    }
    let mut raw = Vec::with_capacity(12 + id.len());
    raw.extend_from_slice(&id_len.to_le_bytes());
    raw.extend_from_slice(&id);
    raw.extend_from_slice(&n_frames.to_le_bytes());
    raw.extend_from_slice(&n_bins.to_le_bytes());
    let id = String::from_utf8(id).map_err(|_| corrupt("id is not UTF-8"))?;
    Ok(Header {
        id,
        n_frames: n_frames as usize,
        n_bins: n_bins as usize,
        raw,
    })
}

fn open_at(path: &Path, offset: u64) -> Result<(BufReader<File>, u64), FeatureError> {
    let mut file = File::open(path).map_err(|e| FeatureError::io(path, e))?;
    let len = file
        .metadata()
        .map_err(|e| FeatureError::io(path, e))?
        .len();
    file.seek(SeekFrom::Start(offset))
        .map_err(|e| FeatureError::io(path, e))?;
    Ok((BufReader::new(file), len))
}

/// Reads `(id, T, F)` of the record at `offset` without touching its payload.
pub fn read_record_header(
    path: &Path,
    offset: u64,
) -> Result<(String, usize, usize), FeatureError> {
    let (mut r, len) = open_at(path, offset)?;
    let h = read_header(&mut r, path, offset, len)?;
    Ok((h.id, h.n_frames, h.n_bins))
}

/// Reads and checksum-verifies the record at `offset`.
pub fn read_record(path: &Path, offset: u64) -> Result<(String, FeatureMatrix), FeatureError> {
    let (mut r, len) = open_at(path, offset)?;
    let h = read_header(&mut r, path, offset, len)?;
    let mut payload = vec![0u8; h.n_frames * h.n_bins * 4];
    r.read_exact(&mut payload)
        .map_err(|e| FeatureError::io(path, e))?;
    let stored = read_u32(&mut r, path)?;
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&h.raw);
    hasher.update(&payload);
    if hasher.finalize() != stored {
        return Err(FeatureError::ChecksumMismatch {
            path: path.to_path_buf(),
            offset,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let m = FeatureMatrix::new(data, h.n_frames, h.n_bins).map_err(|_| FeatureError::Corrupt {
        path: path.to_path_buf(),
        offset,
        reason: "empty matrix".into(),
    })?;
    Ok((h.id, m))
}

struct ShardWriter {
    next_shard: usize,
    current: Option<(String, File, u64)>,
}

/// A feature cache keyed by utterance id. Any number of threads may read
/// while one appends; records become visible once fully written.
pub struct FeatureArchive {
    dir: PathBuf,
    index: RwLock<BTreeMap<String, Location>>,
    writer: Mutex<ShardWriter>,
    shard_limit: u64,
}

impl std::fmt::Debug for FeatureArchive {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureArchive")
            .field("dir", &self.dir)
            .finish_non_exhaustive()
    }
}

fn shard_number(name: &str) -> Option<usize> {
    name.strip_prefix("shard-")?
        .strip_suffix(".bin")?
        .parse()
        .ok()
}

impl FeatureArchive {
    /// Opens the archive in `dir`, creating the directory if needed.
    pub fn open(dir: impl Into<PathBuf>) -> Result<FeatureArchive, FeatureError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| FeatureError::io(&dir, e))?;
        let index_path = dir.join(INDEX_FILE);
        let index: BTreeMap<String, Location> = if index_path.exists() {
            let text =
                fs::read_to_string(&index_path).map_err(|e| FeatureError::io(&index_path, e))?;
            serde_json::from_str(&text).map_err(|e| FeatureError::Corrupt {
                path: index_path.clone(),
                offset: 0,
                reason: e.to_string(),
            })?
        } else {
            BTreeMap::new()
        };
        let mut next_shard = 0;
        for entry in fs::read_dir(&dir).map_err(|e| FeatureError::io(&dir, e))? {
            let entry = entry.map_err(|e| FeatureError::io(&dir, e))?;
            if let Some(n) = entry.file_name().to_str().and_then(shard_number) {
                next_shard = next_shard.max(n + 1);
            }
        }
        Ok(FeatureArchive {
            dir,
            index: RwLock::new(index),
            writer: Mutex::new(ShardWriter {
                next_shard,
                current: None,
            }),
            shard_limit: DEFAULT_SHARD_LIMIT,
        })
    }

    pub fn with_shard_limit(mut self, bytes: u64) -> Self {
        self.shard_limit = bytes.max(1);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn location(&self, id: &str) -> Option<Location> {
        self.index.read().unwrap().get(id).cloned()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.read().unwrap().contains_key(id)
    }

    pub fn shard_path(&self, loc: &Location) -> PathBuf {
        self.dir.join(&loc.shard)
    }

    pub fn get(&self, id: &str) -> Result<Option<FeatureMatrix>, FeatureError> {
        let Some(loc) = self.location(id) else {
            return Ok(None);
        };
        let path = self.shard_path(&loc);
        let (found, m) = read_record(&path, loc.offset)?;
        if found != id {
            return Err(FeatureError::IdMismatch {
                path,
                offset: loc.offset,
                expected: id.into(),
                found,
            });
        }
        Ok(Some(m))
    }

    /// Appends a record and publishes it in the index.
    pub fn put(&self, id: &str, m: &FeatureMatrix) -> Result<Location, FeatureError> {
        let record = encode_record(id, m);
        let mut w = self.writer.lock().unwrap();
        let full = w
            .current
            .as_ref()
            .is_some_and(|(_, _, len)| *len > 0 && len + record.len() as u64 > self.shard_limit);
        if w.current.is_none() || full {
            let name = format!("shard-{:05}.bin", w.next_shard);
            let path = self.dir.join(&name);
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| FeatureError::io(&path, e))?;
            w.next_shard += 1;
            w.current = Some((name, file, 0));
        }
        let (name, file, len) = w.current.as_mut().unwrap();
        file.write_all(&record)
            .map_err(|e| FeatureError::io(self.dir.join(&*name), e))?;
        let loc = Location {
            shard: name.clone(),
            offset: *len,
        };
        *len += record.len() as u64;
        drop(w);
        self.index
            .write()
            .unwrap()
            .insert(id.to_string(), loc.clone());
        Ok(loc)
    }

    /// Writes `index.json`.
    pub fn flush(&self) -> Result<(), FeatureError> {
        let w = self.writer.lock().unwrap();
        if let Some((name, file, _)) = w.current.as_ref() {
            file.sync_data()
                .map_err(|e| FeatureError::io(self.dir.join(name), e))?;
        }
        let text = serde_json::to_string(&*self.index.read().unwrap()).expect("index serializes");
        let tmp = self.dir.join("index.json.tmp");
        fs::write(&tmp, text).map_err(|e| FeatureError::io(&tmp, e))?;
        let dest = self.dir.join(INDEX_FILE);
        fs::rename(&tmp, &dest).map_err(|e| FeatureError::io(&dest, e))
    }
}
