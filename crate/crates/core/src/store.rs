//! Durable store: an append-only record journal plus harvest state.
//!
//! Directory layout:
//!
//! ```text
//! <store_dir>/journal.ndjson       one entry per line
//! <store_dir>/harvest_state.json   {"<provider_key>": HarvestState, ...}
//! <store_dir>/providers.json       [ProviderConfig, ...]
//! <store_dir>/store.lock           held by the single writer
//! ```
//!
//! Each journal line is the compact JSON of a [`JournalEntry`] with a
//! trailing `"crc"` member holding the CRC32C (8 lowercase hex digits) of the
//! entry JSON *without* that member:
//!
//! ```text
//! {"seq":1,"written_at":"2010-05-01T00:00:00Z","kind":"upsert","record":{...},"crc":"1a2b3c4d"}
//! ```
//!
//! A damaged or unterminated final line is a crash artifact and is truncated
//! on open. Damage anywhere else is reported as an integrity error.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harvest::{HarvestState, ProviderConfig};
use crate::model::{MetadataRecord, RecordId, Tombstone};
use crate::time::{self, rfc3339};

pub const JOURNAL_FILE: &str = "journal.ndjson";
pub const STATE_FILE: &str = "harvest_state.json";
pub const PROVIDERS_FILE: &str = "providers.json";
pub const LOCK_FILE: &str = "store.lock";

/// Length of `,"crc":"xxxxxxxx"}`.
const CRC_SUFFIX_LEN: usize = 18;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("journal entry seq {got} does not follow last seq {last}")]
    NonConsecutive { last: u64, got: u64 },
    #[error("journal corrupted at seq {seq} (line {line}): {reason}")]
    Integrity {
        seq: u64,
        line: usize,
        reason: String,
    },
    #[error("store {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("store opened read-only")]
    ReadOnly,
    #[error("{file}: {source}")]
    Json {
        file: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> StoreError {
    let context = context.into();
    move |source| StoreError::Io { context, source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum JournalOp {
    Upsert(MetadataRecord),
    Tombstone(Tombstone),
}

impl JournalOp {
    pub fn record_id(&self) -> &RecordId {
        match self {
            JournalOp::Upsert(r) => &r.record_id,
            JournalOp::Tombstone(t) => &t.record_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    #[serde(with = "rfc3339")]
    pub written_at: DateTime<Utc>,
    #[serde(flatten)]
    pub op: JournalOp,
}

/// Serialize an entry as one journal line, including the trailing newline.
pub fn encode_line(entry: &JournalEntry) -> String {
    let payload = serde_json::to_string(entry).expect("journal entries serialize");
    let crc = crc32c::crc32c(payload.as_bytes());
    let mut line = String::with_capacity(payload.len() + CRC_SUFFIX_LEN + 1);
    line.push_str(&payload[..payload.len() - 1]);
    line.push_str(&format!(",\"crc\":\"{crc:08x}\"}}\n"));
    line
}

/// Decode one line (without its newline), verifying the checksum.
pub fn decode_line(line: &[u8]) -> Result<JournalEntry, String> {
    let line = std::str::from_utf8(line).map_err(|e| format!("invalid UTF-8: {e}"))?;
    if line.len() < CRC_SUFFIX_LEN + 2 || !line.is_char_boundary(line.len() - CRC_SUFFIX_LEN) {
        return Err("line too short".into());
    }
    let (body, suffix) = line.split_at(line.len() - CRC_SUFFIX_LEN);
    let hex = suffix
        .strip_prefix(",\"crc\":\"")
        .and_then(|s| s.strip_suffix("\"}"))
        .filter(|h| h.len() == 8 && h.bytes().all(|b| b.is_ascii_hexdigit()))
        .ok_or("missing crc member")?;
    let expected = u32::from_str_radix(hex, 16).map_err(|e| e.to_string())?;
    let payload = format!("{body}}}");
    let actual = crc32c::crc32c(payload.as_bytes());
    if actual != expected {
        return Err(format!(
            "crc mismatch: stored {expected:08x}, computed {actual:08x}"
        ));
    }
    serde_json::from_str(&payload).map_err(|e| e.to_string())
}

/// Live record set folded from journal entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LiveState {
    pub records: BTreeMap<RecordId, MetadataRecord>,
    /// Deletion datestamps of ids whose last journal op was a tombstone.
    pub tombstones: HashMap<RecordId, DateTime<Utc>>,
}

impl LiveState {
    /// Fold one op. Upserts only replace records whose stored datestamp is
    /// not newer; tombstones always remove.
    pub fn apply(&mut self, op: &JournalOp) {
        match op {
            JournalOp::Upsert(r) => {
                if let Some(existing) = self.records.get(&r.record_id) {
                    if r.datestamp < existing.datestamp {
                        return;
                    }
                }
                self.tombstones.remove(&r.record_id);
                self.records.insert(r.record_id.clone(), r.clone());
            }
            JournalOp::Tombstone(t) => {
                self.records.remove(&t.record_id);
                let ds = self
                    .tombstones
                    .entry(t.record_id.clone())
                    .or_insert(t.datestamp);
                if t.datestamp > *ds {
                    *ds = t.datestamp;
                }
            }
        }
    }
}

/// Fold entries in seq order into the live record set.
pub fn replay<'a>(entries: impl IntoIterator<Item = &'a JournalEntry>) -> LiveState {
    let mut state = LiveState::default();
    for e in entries {
        state.apply(&e.op);
    }
    state
}

/// Result of scanning a journal file.
#[derive(Debug)]
pub struct JournalScan {
    pub entries: Vec<JournalEntry>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    /// Bytes after the valid prefix (a torn final entry).
    pub torn_bytes: u64,
}

pub fn scan_journal(bytes: &[u8]) -> Result<JournalScan, StoreError> {
    let mut entries: Vec<JournalEntry> = Vec::new();
    let mut pos = 0usize;
    let mut line_no = 0usize;
    while pos < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[pos..].iter().position(|&b| b == b'\n') {
            Some(i) => (&bytes[pos..pos + i], pos + i + 1, true),
            None => (&bytes[pos..], bytes.len(), false),
        };
        let is_last = next >= bytes.len();
        let expected_seq = entries.last().map_or(1, |e| e.seq + 1);
        let decoded = if terminated {
            decode_line(line)
        } else {
            Err("unterminated line".to_string())
        };
        match decoded {
            Ok(entry) if entry.seq == expected_seq => {
                entries.push(entry);
                pos = next;
            }
            Ok(entry) => {
                return Err(StoreError::Integrity {
                    seq: entry.seq,
                    line: line_no,
                    reason: format!("expected seq {expected_seq}"),
                })
            }
            Err(_) if is_last => break,
            Err(reason) => {
                return Err(StoreError::Integrity {
                    seq: expected_seq,
                    line: line_no,
                    reason,
                })
            }
        }
    }
    Ok(JournalScan {
        entries,
        valid_len: pos as u64,
        torn_bytes: (bytes.len() - pos) as u64,
    })
}

fn sync_dir(dir: &Path) {
    // directory fsync is unsupported on some platforms; failures are not fatal
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(format!("create {}", tmp.display())))?;
        f.write_all(bytes)
            .map_err(io_err(format!("write {}", tmp.display())))?;
        f.sync_all()
            .map_err(io_err(format!("sync {}", tmp.display())))?;
    }
    fs::rename(&tmp, path).map_err(io_err(format!("rename to {}", path.display())))?;
    if let Some(dir) = path.parent() {
        sync_dir(dir);
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T, StoreError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|source| StoreError::Json {
            file: path.display().to_string(),
            source,
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(T::default()),
        Err(e) => Err(io_err(format!("read {}", path.display()))(e)),
    }
}

/// Store directory handle. A writable store holds an exclusive lock on
/// `store.lock` for its lifetime.
#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    journal: Option<File>,
    _lock: Option<File>,
    last_seq: u64,
    journal_len: u64,
    live: LiveState,
    recovered_bytes: u64,
    providers_path: PathBuf,
}

impl Store {
    /// Open (creating if needed) for writing. A torn final journal entry is
    /// truncated away.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(format!("create {}", dir.display())))?;
        let lock_path = dir.join(LOCK_FILE);
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(format!("open {}", lock_path.display())))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(dir)),
            Err(fs::TryLockError::Error(e)) => return Err(io_err("lock store")(e)),
        }

        let path = dir.join(JOURNAL_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io_err(format!("open {}", path.display())))?;
        let bytes = fs::read(&path).map_err(io_err(format!("read {}", path.display())))?;
        let scan = scan_journal(&bytes)?;
        if scan.torn_bytes > 0 {
            tracing::warn!(
                bytes = scan.torn_bytes,
                "truncating torn final journal entry"
            );
            file.set_len(scan.valid_len)
                .map_err(io_err("truncate torn journal tail"))?;
            file.sync_all().map_err(io_err("sync journal"))?;
        }
        Ok(Self {
            live: replay(&scan.entries),
            last_seq: scan.entries.last().map_or(0, |e| e.seq),
            journal_len: scan.valid_len,
            recovered_bytes: scan.torn_bytes,
            journal: Some(file),
            _lock: Some(lock),
            providers_path: dir.join(PROVIDERS_FILE),
            dir,
        })
    }

    /// Open without taking the writer lock or modifying any file. A torn
    /// final entry is ignored rather than truncated.
    pub fn open_read_only(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(JOURNAL_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(format!("read {}", path.display()))(e)),
        };
        let scan = scan_journal(&bytes)?;
        Ok(Self {
            live: replay(&scan.entries),
            last_seq: scan.entries.last().map_or(0, |e| e.seq),
            journal_len: scan.valid_len,
            recovered_bytes: scan.torn_bytes,
            journal: None,
            _lock: None,
            providers_path: dir.join(PROVIDERS_FILE),
            dir,
        })
    }

    /// Keep the provider list somewhere other than the store directory.
    pub fn with_providers_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.providers_path = path.into();
        self
    }

    pub fn providers_path(&self) -> &Path {
        &self.providers_path
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn journal_path(&self) -> PathBuf {
        self.dir.join(JOURNAL_FILE)
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Bytes discarded from a torn tail when the store was opened.
    pub fn recovered_bytes(&self) -> u64 {
        self.recovered_bytes
    }

    pub fn live(&self) -> &LiveState {
        &self.live
    }

    /// Read every entry currently in the journal.
    pub fn entries(&self) -> Result<Vec<JournalEntry>, StoreError> {
        let path = self.journal_path();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(format!("read {}", path.display()))(e)),
        };
        let mut scan = scan_journal(&bytes)?;
        scan.entries.truncate(self.last_seq as usize);
        Ok(scan.entries)
    }

    fn write_lines(&mut self, entries: &[JournalEntry]) -> Result<(), StoreError> {
        let file = self.journal.as_mut().ok_or(StoreError::ReadOnly)?;
        let mut buf = String::new();
        for e in entries {
            buf.push_str(&encode_line(e));
        }
        let result = file
            .write_all(buf.as_bytes())
            .and_then(|_| file.sync_data());
        if let Err(e) = result {
            // roll back so the journal never keeps half a batch
            let _ = file.set_len(self.journal_len);
            return Err(io_err("append to journal")(e));
        }
        self.journal_len += buf.len() as u64;
        Ok(())
    }

    /// Append one fully-formed entry; its seq must be `last_seq + 1`.
    pub fn append(&mut self, entry: JournalEntry) -> Result<(), StoreError> {
        if entry.seq != self.last_seq + 1 {
            return Err(StoreError::NonConsecutive {
                last: self.last_seq,
                got: entry.seq,
            });
        }
        self.write_lines(std::slice::from_ref(&entry))?;
        self.last_seq = entry.seq;
        self.live.apply(&entry.op);
        Ok(())
    }

    /// Append a batch of ops atomically (all lines written and synced, or
    /// none), assigning consecutive seqs.
    pub fn append_batch(&mut self, ops: Vec<JournalOp>) -> Result<Vec<JournalEntry>, StoreError> {
        if ops.is_empty() {
            return Ok(Vec::new());
        }
        let written_at = time::now();
        let entries: Vec<JournalEntry> = ops
            .into_iter()
            .enumerate()
            .map(|(i, op)| JournalEntry {
                seq: self.last_seq + 1 + i as u64,
                written_at,
                op,
            })
            .collect();
        self.write_lines(&entries)?;
        self.last_seq += entries.len() as u64;
        for e in &entries {
            self.live.apply(&e.op);
        }
        Ok(entries)
    }

    /// Rewrite the journal as one upsert per live record, ordered by record
    /// id and renumbered from 1. The old journal is replaced atomically.
    pub fn compact(&mut self) -> Result<usize, StoreError> {
        if self.journal.is_none() {
            return Err(StoreError::ReadOnly);
        }
        let written_at = time::now();
        let mut buf = String::new();
        let mut n = 0u64;
        for record in self.live.records.values() {
            n += 1;
            buf.push_str(&encode_line(&JournalEntry {
                seq: n,
                written_at,
                op: JournalOp::Upsert(record.clone()),
            }));
        }
        let path = self.journal_path();
        let tmp = path.with_extension("ndjson.compact");
        {
            let mut f = File::create(&tmp).map_err(io_err(format!("create {}", tmp.display())))?;
            f.write_all(buf.as_bytes())
                .and_then(|_| f.sync_all())
                .map_err(io_err(format!("write {}", tmp.display())))?;
        }
        fs::rename(&tmp, &path).map_err(io_err("replace journal"))?;
        sync_dir(&self.dir);
        let file = OpenOptions::new()
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io_err(format!("reopen {}", path.display())))?;
        self.journal = Some(file);
        self.last_seq = n;
        self.journal_len = buf.len() as u64;
        self.live.tombstones.clear();
        Ok(n as usize)
    }

    pub fn load_providers(&self) -> Result<Vec<ProviderConfig>, StoreError> {
        read_json(&self.providers_path)
    }

    pub fn save_providers(&self, providers: &[ProviderConfig]) -> Result<(), StoreError> {
        if self.journal.is_none() {
            return Err(StoreError::ReadOnly);
        }
        let json = serde_json::to_vec_pretty(providers).expect("providers serialize");
        write_atomic(&self.providers_path, &json)
    }

    pub fn load_harvest_states(&self) -> Result<BTreeMap<String, HarvestState>, StoreError> {
        read_json(&self.dir.join(STATE_FILE))
    }

    pub fn save_harvest_states(
        &self,
        states: &BTreeMap<String, HarvestState>,
    ) -> Result<(), StoreError> {
        if self.journal.is_none() {
            return Err(StoreError::ReadOnly);
        }
        let json = serde_json::to_vec_pretty(states).expect("states serialize");
        write_atomic(&self.dir.join(STATE_FILE), &json)
    }
}
