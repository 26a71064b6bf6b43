//! Append-only, hash-chained audit log.
//!
//! One canonical JSON object per line:
//! `{"entry_hash","kind","payload","prev_hash","seq","ts"}` with
//! `entry_hash = SHA-256(prev_hash || canonical({kind, payload, seq, ts}))`.
//! Sequence numbers start at 1 and the first entry chains to 32 zero bytes.
//! A line verifies only if it is byte-identical to its canonical re-encoding,
//! so every single-byte edit is attributed to the entry that contains it.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical;
use crate::crypto;

pub const GENESIS_HASH: [u8; 32] = [0u8; 32];

pub type Clock = Box<dyn Fn() -> u64 + Send + Sync>;

/// Milliseconds since the Unix epoch.
pub fn system_clock() -> Clock {
    Box::new(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditEntry {
    pub seq: u64,
    pub ts: u64,
    pub kind: String,
    pub payload: Value,
    pub prev_hash: String,
    pub entry_hash: String,
}

impl AuditEntry {
    pub fn compute_hash(prev_hash: &[u8; 32], seq: u64, ts: u64, kind: &str, payload: &Value) -> [u8; 32] {
        let body = json!({ "seq": seq, "ts": ts, "kind": kind, "payload": payload });
        let bytes = canonical::to_bytes(&body).expect("JSON values always serialize");
        crypto::sha256(&[prev_hash, &bytes])
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit log io: {0}")]
    Io(#[from] io::Error),
    #[error("existing audit log does not verify: {0}")]
    Corrupt(AuditVerdict),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BreakKind {
    /// The line is not a canonical entry.
    Malformed,
    /// The entry's content does not hash to its `entry_hash`.
    HashMismatch,
    /// `prev_hash` does not match the preceding entry.
    ChainBreak,
    /// Sequence numbers skip or repeat.
    Gap { expected: u64, found: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditVerdict {
    Accepted { entries: u64 },
    /// `entry` is the 1-based line number of the first bad entry.
    Broken { entry: u64, kind: BreakKind },
}

impl AuditVerdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, AuditVerdict::Accepted { .. })
    }
}

impl fmt::Display for AuditVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditVerdict::Accepted { entries } => write!(f, "accepted ({entries} entries)"),
            AuditVerdict::Broken { entry, kind } => match kind {
                BreakKind::Malformed => write!(f, "broken at entry {entry}: malformed"),
                BreakKind::HashMismatch => write!(f, "broken at entry {entry}: hash mismatch"),
                BreakKind::ChainBreak => write!(f, "broken at entry {entry}: chain break"),
                BreakKind::Gap { expected, found } => {
                    write!(f, "broken at entry {entry}: gap, expected seq {expected}, found {found}")
                }
            },
        }
    }
}

struct Tail {
    seq: u64,
    hash: [u8; 32],
}

/// Walks `text`, returning the verdict and the chain head if accepted.
fn check(text: &[u8]) -> (AuditVerdict, Option<Tail>) {
    let mut prev = GENESIS_HASH;
    let mut count = 0u64;
    let body = match text.last() {
        None => return (AuditVerdict::Accepted { entries: 0 }, Some(Tail { seq: 0, hash: prev })),
        Some(b'\n') => &text[..text.len() - 1],
        Some(_) => text,
    };
    for (i, line) in body.split(|&b| b == b'\n').enumerate() {
        let n = i as u64 + 1;
        let broken = |kind| (AuditVerdict::Broken { entry: n, kind }, None);
        let entry: AuditEntry = match serde_json::from_slice(line) {
            Ok(e) => e,
            Err(_) => return broken(BreakKind::Malformed),
        };
        match canonical::to_bytes(&entry) {
            Ok(c) if c == line => {}
            _ => return broken(BreakKind::Malformed),
        }
        let (Ok(stated_prev), Ok(stated_hash)) = (
            crypto::hex_array::<32>(&entry.prev_hash),
            crypto::hex_array::<32>(&entry.entry_hash),
        ) else {
            return broken(BreakKind::Malformed);
        };
        if hex::encode(stated_prev) != entry.prev_hash || hex::encode(stated_hash) != entry.entry_hash {
            return broken(BreakKind::Malformed);
        }
        if AuditEntry::compute_hash(&stated_prev, entry.seq, entry.ts, &entry.kind, &entry.payload) != stated_hash {
            return broken(BreakKind::HashMismatch);
        }
        if stated_prev != prev {
            return broken(BreakKind::ChainBreak);
        }
        if entry.seq != n {
            return broken(BreakKind::Gap { expected: n, found: entry.seq });
        }
        prev = stated_hash;
        count = n;
    }
    if text.last() != Some(&b'\n') {
        return (AuditVerdict::Broken { entry: count.max(1), kind: BreakKind::Malformed }, None);
    }
    (AuditVerdict::Accepted { entries: count }, Some(Tail { seq: count, hash: prev }))
}

pub fn verify_audit_bytes(text: &[u8]) -> AuditVerdict {
    check(text).0
}

pub fn verify_audit(path: &Path) -> io::Result<AuditVerdict> {
    Ok(verify_audit_bytes(&std::fs::read(path)?))
}

/// Writer half of the log. Appends are synced before returning.
pub struct AuditLog {
    path: PathBuf,
    file: File,
    tail: Tail,
    clock: Clock,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog")
            .field("path", &self.path)
            .field("seq", &self.tail.seq)
            .finish()
    }
}

impl AuditLog {
    pub fn open(path: &Path) -> Result<Self, AuditError> {
        Self::open_with_clock(path, system_clock())
    }

    /// Opens or creates the log, refusing to extend one that does not verify.
    pub fn open_with_clock(path: &Path, clock: Clock) -> Result<Self, AuditError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let existing = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (verdict, tail) = check(&existing);
        let tail = tail.ok_or(AuditError::Corrupt(verdict))?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            tail,
            clock,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.tail.seq
    }

    pub fn is_empty(&self) -> bool {
        self.tail.seq == 0
    }

    pub fn head(&self) -> [u8; 32] {
        self.tail.hash
    }

    pub fn append(&mut self, kind: &str, payload: Value) -> Result<AuditEntry, AuditError> {
        let seq = self.tail.seq + 1;
        let ts = (self.clock)();
        let hash = AuditEntry::compute_hash(&self.tail.hash, seq, ts, kind, &payload);
        let entry = AuditEntry {
            seq,
            ts,
            kind: kind.to_string(),
            payload,
            prev_hash: hex::encode(self.tail.hash),
            entry_hash: hex::encode(hash),
        };
        let mut line = canonical::to_bytes(&entry).expect("audit entries serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.sync_data()?;
        self.tail = Tail { seq, hash };
        Ok(entry)
    }
}

/// Parses every entry of an accepted log.
pub fn read_entries(path: &Path) -> io::Result<Vec<AuditEntry>> {
    let text = std::fs::read(path)?;
    text.split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::sync::Arc;

    fn fixed_clock() -> Clock {
        let t = Arc::new(AtomicU64::new(1_000));
        Box::new(move || t.fetch_add(1, Ordering::SeqCst))
    }

    fn sample(dir: &Path, n: u64) -> PathBuf {
        let path = dir.join("audit.log");
        let mut log = AuditLog::open_with_clock(&path, fixed_clock()).unwrap();
        for i in 0..n {
            log.append("event", json!({ "i": i, "note": "x\ny" })).unwrap();
        }
        path
    }

    #[test]
    fn untouched_log_accepts_and_reopens() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path(), 5);
        assert_eq!(verify_audit(&path).unwrap(), AuditVerdict::Accepted { entries: 5 });
        let mut log = AuditLog::open(&path).unwrap();
        assert_eq!(log.len(), 5);
        log.append("more", json!(null)).unwrap();
        assert_eq!(verify_audit(&path).unwrap(), AuditVerdict::Accepted { entries: 6 });
        assert_eq!(read_entries(&path).unwrap()[5].kind, "more");
    }

    #[test]
    fn edit_in_entry_three_is_localized() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path(), 5);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let edited = lines[2].replacen("\"i\":2", "\"i\":7", 1);
        let mut out: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        out[2] = edited;
        std::fs::write(&path, out.join("\n") + "\n").unwrap();
        assert_eq!(
            verify_audit(&path).unwrap(),
            AuditVerdict::Broken { entry: 3, kind: BreakKind::HashMismatch }
        );
        assert!(matches!(AuditLog::open(&path), Err(AuditError::Corrupt(_))));
    }

    #[test]
    fn deleted_entry_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path(), 5);
        let text = std::fs::read_to_string(&path).unwrap();
        let kept: Vec<&str> = text.lines().enumerate().filter(|(i, _)| *i != 1).map(|(_, l)| l).collect();
        std::fs::write(&path, kept.join("\n") + "\n").unwrap();
        let v = verify_audit(&path).unwrap();
        assert!(matches!(v, AuditVerdict::Broken { entry: 2, .. }), "{v}");
    }

    #[test]
    fn uppercase_hex_is_not_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path(), 2);
        let text = std::fs::read_to_string(&path).unwrap();
        let second = text.lines().nth(1).unwrap();
        let at = second.find("\"prev_hash\":\"").unwrap() + 13;
        let pos = (at..at + 64).find(|&i| second.as_bytes()[i].is_ascii_lowercase()).unwrap();
        let offset = text.find('\n').unwrap() + 1 + pos;
        let mut bytes = text.into_bytes();
        bytes[offset] = bytes[offset].to_ascii_uppercase();
        assert_eq!(
            verify_audit_bytes(&bytes),
            AuditVerdict::Broken { entry: 2, kind: BreakKind::Malformed }
        );
    }

    #[test]
    fn float_payloads_reverify() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.log");
        let mut log = AuditLog::open(&path).unwrap();
        let mut x = 0.1f64;
        for i in 0..200 {
            x = (x * 1.37 + 0.011).fract() / 3.0 + i as f64 * 1e-17;
            log.append("f", json!({ "x": x, "tiny": x * 1e-300, "big": x * 1e300 })).unwrap();
        }
        assert_eq!(verify_audit(&path).unwrap(), AuditVerdict::Accepted { entries: 200 });
    }

    #[test]
    fn empty_and_truncated() {
        assert_eq!(verify_audit_bytes(b""), AuditVerdict::Accepted { entries: 0 });
        let dir = tempfile::tempdir().unwrap();
        let path = sample(dir.path(), 2);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        bytes.pop();
        assert!(matches!(
            verify_audit_bytes(&bytes),
            AuditVerdict::Broken { entry: 2, kind: BreakKind::Malformed }
        ));
    }
}
