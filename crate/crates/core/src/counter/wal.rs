//! Append-only write-ahead log backing the counter service.
//!
//! Records are `counter_id 16B | value u64 BE | checksum 8B`, the checksum
//! being the first 8 bytes of SHA-256 over the preceding 24. Replay stops at
//! the first torn or corrupt record.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::CounterId;
use crate::crypto;

pub const RECORD_LEN: usize = 32;

pub trait WalStore: Send {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    /// Makes every appended byte durable.
    fn sync(&mut self) -> io::Result<()>;
    fn read_all(&mut self) -> io::Result<Vec<u8>>;
}

pub fn encode_record(id: &CounterId, value: u64) -> [u8; RECORD_LEN] {
    let mut rec = [0u8; RECORD_LEN];
    rec[..16].copy_from_slice(&id.0);
    rec[16..24].copy_from_slice(&value.to_be_bytes());
    let sum = crypto::sha256(&[&rec[..24]]);
    rec[24..].copy_from_slice(&sum[..8]);
    rec
}

/// Latest value per counter found in `log`.
pub fn replay(log: &[u8]) -> HashMap<CounterId, u64> {
    let mut state = HashMap::new();
    for rec in log.chunks_exact(RECORD_LEN) {
        let sum = crypto::sha256(&[&rec[..24]]);
        if sum[..8] != rec[24..] {
            log::warn!("counter log: corrupt record, ignoring the tail");
            break;
        }
        let id = CounterId(rec[..16].try_into().unwrap());
        let value = u64::from_be_bytes(rec[16..24].try_into().unwrap());
        let slot = state.entry(id).or_insert(value);
        *slot = (*slot).max(value);
    }
    state
}

pub struct FileWal {
    path: PathBuf,
    file: File,
}

impl FileWal {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl WalStore for FileWal {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)
    }

    fn sync(&mut self) -> io::Result<()> {
        self.file.sync_data()
    }

    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.file.seek(SeekFrom::Start(0))?;
        self.file.read_to_end(&mut buf)?;
        Ok(buf)
    }
}

#[derive(Debug, Default)]
struct MemState {
    durable: Vec<u8>,
    buffered: Vec<u8>,
}

/// In-memory log that distinguishes durable from merely appended bytes, so
/// tests can simulate power loss. Clones share storage.
#[derive(Debug, Clone, Default)]
pub struct MemWal(Arc<Mutex<MemState>>);

impl MemWal {
    pub fn new() -> Self {
        Self::default()
    }

    /// Discards everything appended since the last sync.
    pub fn crash(&self) {
        self.0.lock().unwrap().buffered.clear();
    }

    pub fn durable_len(&self) -> usize {
        self.0.lock().unwrap().durable.len()
    }
}

impl WalStore for MemWal {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.0.lock().unwrap().buffered.extend_from_slice(bytes);
        Ok(())
    }

    fn sync(&mut self) -> io::Result<()> {
        let mut s = self.0.lock().unwrap();
        let pending = std::mem::take(&mut s.buffered);
        s.durable.extend_from_slice(&pending);
        Ok(())
    }

    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        Ok(self.0.lock().unwrap().durable.clone())
    }
}
