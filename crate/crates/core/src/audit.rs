//! Hash-chained, append-only audit trail.
//!
//! Each record commits to its predecessor:
//!
//! ```text
//! record_hash = SHA-256("agent-esim-audit/v1" || seq u64 || timestamp u64
//!                       || lp(profile_id) || lp(operation) || lp(outcome)
//!                       || request_digest[32] || prev_hash[32])
//! ```
//!
//! where `lp` is a u32 big-endian length prefix. The genesis record has
//! `seq = 0` and an all-zero `prev_hash`. On disk the log is one JSON record
//! per line (`audit.log`), fsynced before the append returns.

use crate::clock::Timestamp;
use crate::digest::Digest32;
use crate::policy::DenyReason;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

const DOMAIN: &[u8] = b"agent-esim-audit/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuditOperation {
    Provision,
    Sign,
    Authenticate,
    Status,
    StateChange,
    PolicyUpdate,
    /// A request refused before it could be attributed to an operation,
    /// such as an admin call with a bad credential.
    Deny,
}

impl AuditOperation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Provision => "Provision",
            Self::Sign => "Sign",
            Self::Authenticate => "Authenticate",
            Self::Status => "Status",
            Self::StateChange => "StateChange",
            Self::PolicyUpdate => "PolicyUpdate",
            Self::Deny => "Deny",
        }
    }
}

impl fmt::Display for AuditOperation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict")]
pub enum AuditOutcome {
    Allowed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Denied {
        reason: DenyReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Error {
        kind: String,
    },
}

impl AuditOutcome {
    pub fn allowed() -> Self {
        Self::Allowed { detail: None }
    }

    pub fn is_allowed(&self) -> bool {
        matches!(self, Self::Allowed { .. })
    }

    /// Stable text form that enters the record hash.
    pub fn canonical(&self) -> String {
        match self {
            Self::Allowed { detail: None } => "Allowed".into(),
            Self::Allowed { detail: Some(d) } => format!("Allowed:{d}"),
            Self::Denied { reason, detail: None } => format!("Denied:{reason}"),
            Self::Denied { reason, detail: Some(d) } => format!("Denied:{reason}:{d}"),
            Self::Error { kind } => format!("Error:{kind}"),
        }
    }
}

impl fmt::Display for AuditOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

/// The caller-supplied part of a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub profile_id: String,
    pub operation: AuditOperation,
    pub outcome: AuditOutcome,
    pub request_digest: Digest32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: Timestamp,
    pub profile_id: String,
    pub operation: AuditOperation,
    pub outcome: AuditOutcome,
    pub request_digest: Digest32,
    pub prev_hash: Digest32,
    pub record_hash: Digest32,
}

fn put_lp(h: &mut Sha256, s: &str) {
    h.update((s.len() as u32).to_be_bytes());
    h.update(s.as_bytes());
}

impl AuditRecord {
    pub fn compute_hash(&self) -> Digest32 {
        let mut h = Sha256::new();
        h.update(DOMAIN);
        h.update(self.seq.to_be_bytes());
        h.update(self.timestamp.as_millis().to_be_bytes());
        put_lp(&mut h, &self.profile_id);
        put_lp(&mut h, self.operation.as_str());
        put_lp(&mut h, &self.outcome.canonical());
        h.update(self.request_digest.as_bytes());
        h.update(self.prev_hash.as_bytes());
        Digest32(h.finalize().into())
    }

    /// Builds the record that follows `prev` (or the genesis record).
    pub fn chained(prev: Option<&AuditRecord>, timestamp: Timestamp, entry: AuditEntry) -> Self {
        let mut rec = Self {
            seq: prev.map_or(0, |p| p.seq + 1),
            timestamp,
            profile_id: entry.profile_id,
            operation: entry.operation,
            outcome: entry.outcome,
            request_digest: entry.request_digest,
            prev_hash: prev.map_or(Digest32::ZERO, |p| p.record_hash),
            record_hash: Digest32::ZERO,
        };
        rec.record_hash = rec.compute_hash();
        rec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainVerdict {
    Intact { len: u64 },
    Broken { first_bad_seq: u64 },
}

impl ChainVerdict {
    pub fn is_intact(&self) -> bool {
        matches!(self, Self::Intact { .. })
    }
}

impl fmt::Display for ChainVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Intact { len } => write!(f, "ok ({len} records)"),
            Self::Broken { first_bad_seq } => write!(f, "broken at seq {first_bad_seq}"),
        }
    }
}

/// Position `i` must hold seq `i`, link to record `i - 1` and hash correctly.
/// The first position where any of that fails is reported.
pub fn verify_audit_chain(records: &[AuditRecord]) -> ChainVerdict {
    let mut prev = Digest32::ZERO;
    for (i, rec) in records.iter().enumerate() {
        let i = i as u64;
        if rec.seq != i || rec.prev_hash != prev || rec.compute_hash() != rec.record_hash {
            return ChainVerdict::Broken { first_bad_seq: i };
        }
        prev = rec.record_hash;
    }
    ChainVerdict::Intact {
        len: records.len() as u64,
    }
}

/// A chain head recorded out of band (e.g. from `/admin/audit/verify`).
/// Truncating the tail leaves an internally consistent chain; only a
/// previously seen head reveals it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainAnchor {
    pub len: u64,
    pub head_hash: Digest32,
}

impl ChainAnchor {
    pub fn of(records: &[AuditRecord]) -> Option<Self> {
        records.last().map(|r| Self {
            len: records.len() as u64,
            head_hash: r.record_hash,
        })
    }
}

/// Like [`verify_audit_chain`], and additionally requires record
/// `anchor.len - 1` to exist with the anchored hash. A missing anchored
/// record is reported at the first missing seq.
pub fn verify_audit_chain_anchored(records: &[AuditRecord], anchor: &ChainAnchor) -> ChainVerdict {
    let verdict = verify_audit_chain(records);
    if !verdict.is_intact() || anchor.len == 0 {
        return verdict;
    }
    match records.get(anchor.len as usize - 1) {
        Some(r) if r.record_hash == anchor.head_hash => verdict,
        Some(_) => ChainVerdict::Broken {
            first_bad_seq: anchor.len - 1,
        },
        None => ChainVerdict::Broken {
            first_bad_seq: records.len() as u64,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileVerification {
    pub verdict: ChainVerdict,
    /// Complete records read from the file.
    pub records: u64,
    /// The file ended in a partial line, which was ignored.
    pub truncated_tail: bool,
}

struct ParsedLog {
    records: Vec<AuditRecord>,
    /// Index of the first line that is not a record, if any complete line is bad.
    unparsable_at: Option<u64>,
    /// Byte length of the well-formed prefix (complete lines).
    good_len: u64,
    truncated_tail: bool,
}

fn parse_log(reader: impl io::Read) -> io::Result<ParsedLog> {
    let mut reader = BufReader::new(reader);
    let mut out = ParsedLog {
        records: Vec::new(),
        unparsable_at: None,
        good_len: 0,
        truncated_tail: false,
    };
    let mut line = Vec::new();
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        if line.last() != Some(&b'\n') {
            out.truncated_tail = true;
            break;
        }
        if out.unparsable_at.is_some() {
            continue;
        }
        match serde_json::from_slice::<AuditRecord>(&line[..n - 1]) {
            Ok(rec) => {
                out.records.push(rec);
                out.good_len += n as u64;
            }
            Err(_) => out.unparsable_at = Some(out.records.len() as u64),
        }
    }
    Ok(out)
}

/// Verifies an `audit.log` file. A partial last line is a torn write, not
/// tampering: the records before it are verified and the tail is reported.
pub fn verify_audit_file(path: impl AsRef<Path>) -> io::Result<FileVerification> {
    let parsed = parse_log(File::open(path)?)?;
    let verdict = match (verify_audit_chain(&parsed.records), parsed.unparsable_at) {
        (ChainVerdict::Broken { first_bad_seq }, _) => ChainVerdict::Broken { first_bad_seq },
        (ChainVerdict::Intact { .. }, Some(at)) => ChainVerdict::Broken { first_bad_seq: at },
        (intact, None) => intact,
    };
    Ok(FileVerification {
        verdict,
        records: parsed.records.len() as u64,
        truncated_tail: parsed.truncated_tail,
    })
}

pub fn read_audit_file(path: impl AsRef<Path>) -> io::Result<Vec<AuditRecord>> {
    Ok(parse_log(File::open(path)?)?.records)
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("audit log is corrupt at record {0}")]
    Corrupt(u64),
}

/// Where serialized records go. Must be durable when `append` returns.
pub trait AuditSink: Send {
    fn append(&mut self, line: &[u8]) -> io::Result<()>;
}

struct FileSink(File);

impl AuditSink for FileSink {
    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        self.0.write_all(line)?;
        self.0.sync_data()
    }
}

struct Inner {
    records: Vec<AuditRecord>,
    sink: Option<Box<dyn AuditSink>>,
}

/// Appends are globally serialised; the in-memory copy always matches what
/// has been durably written.
pub struct AuditLog {
    inner: Mutex<Inner>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new(Inner {
                records: Vec::new(),
                sink: None,
            }),
        }
    }

    pub fn with_sink(sink: Box<dyn AuditSink>) -> Self {
        Self {
            inner: Mutex::new(Inner {
                records: Vec::new(),
                sink: Some(sink),
            }),
        }
    }

    /// Opens or creates `path`. A torn last line is cut off; any other
    /// unreadable line refuses the open, since appending after it would bury
    /// the damage.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let parsed = parse_log(&mut file)?;
        if let Some(at) = parsed.unparsable_at {
            return Err(AuditError::Corrupt(at));
        }
        if parsed.truncated_tail {
            tracing::warn!(path = %path.display(), "dropping torn audit tail");
            file.set_len(parsed.good_len)?;
            file.sync_all()?;
        }
        if let ChainVerdict::Broken { first_bad_seq } = verify_audit_chain(&parsed.records) {
            tracing::error!(first_bad_seq, "audit chain does not verify; appending anyway");
        }
        Ok(Self {
            inner: Mutex::new(Inner {
                records: parsed.records,
                sink: Some(Box::new(FileSink(file))),
            }),
        })
    }

    pub fn append(&self, timestamp: Timestamp, entry: AuditEntry) -> Result<AuditRecord, AuditError> {
        let mut inner = self.inner.lock();
        let rec = AuditRecord::chained(inner.records.last(), timestamp, entry);
        if let Some(sink) = inner.sink.as_mut() {
            let mut line = serde_json::to_vec(&rec).expect("audit record serializes");
            line.push(b'\n');
            sink.append(&line)?;
        }
        inner.records.push(rec.clone());
        Ok(rec)
    }

    pub fn verify(&self) -> ChainVerdict {
        verify_audit_chain(&self.inner.lock().records)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head(&self) -> Option<Digest32> {
        self.inner.lock().records.last().map(|r| r.record_hash)
    }

    /// Records with `seq >= from`, at most `limit` of them.
    pub fn records(&self, from: u64, limit: usize) -> Vec<AuditRecord> {
        let inner = self.inner.lock();
        inner
            .records
            .iter()
            .skip(from.min(usize::MAX as u64) as usize)
            .take(limit)
            .cloned()
            .collect()
    }

    pub fn snapshot(&self) -> Vec<AuditRecord> {
        self.inner.lock().records.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(i: u64) -> AuditEntry {
        AuditEntry {
            profile_id: format!("prof-{}", i % 3),
            operation: if i.is_multiple_of(2) { AuditOperation::Sign } else { AuditOperation::Authenticate },
            outcome: if i.is_multiple_of(5) {
                AuditOutcome::Denied {
                    reason: DenyReason::RateLimit,
                    detail: None,
                }
            } else {
                AuditOutcome::allowed()
            },
            request_digest: Digest32::of(&i.to_be_bytes()),
        }
    }

    fn chain(n: u64) -> Vec<AuditRecord> {
        let log = AuditLog::in_memory();
        for i in 0..n {
            log.append(Timestamp::from_secs(1_000 + i), entry(i)).unwrap();
        }
        log.snapshot()
    }

    #[test]
    fn genesis_links_to_zero() {
        let c = chain(1);
        assert_eq!(c[0].seq, 0);
        assert_eq!(c[0].prev_hash, Digest32::ZERO);
    }

    #[test]
    fn hash_is_pinned() {
        // Independent recomputation of the documented encoding.
        let rec = &chain(1)[0];
        let mut bytes = b"agent-esim-audit/v1".to_vec();
        bytes.extend_from_slice(&0u64.to_be_bytes());
        bytes.extend_from_slice(&1_000_000u64.to_be_bytes());
        for s in ["prof-0", "Sign", "Denied:RateLimit"] {
            bytes.extend_from_slice(&(s.len() as u32).to_be_bytes());
            bytes.extend_from_slice(s.as_bytes());
        }
        bytes.extend_from_slice(Digest32::of(&0u64.to_be_bytes()).as_bytes());
        bytes.extend_from_slice(&[0u8; 32]);
        assert_eq!(rec.record_hash, Digest32::of(&bytes));
    }

    #[test]
    fn intact_chain_verifies() {
        assert_eq!(verify_audit_chain(&chain(50)), ChainVerdict::Intact { len: 50 });
        assert_eq!(verify_audit_chain(&[]), ChainVerdict::Intact { len: 0 });
    }

    #[test]
    fn deletion_and_swap_are_located() {
        let mut c = chain(20);
        c.remove(7);
        assert_eq!(verify_audit_chain(&c), ChainVerdict::Broken { first_bad_seq: 7 });
        let mut c = chain(20);
        c.swap(11, 12);
        assert_eq!(verify_audit_chain(&c), ChainVerdict::Broken { first_bad_seq: 11 });
        let mut c = chain(20);
        c.pop();
        assert!(verify_audit_chain(&c).is_intact());
    }

    #[test]
    fn anchor_exposes_tail_truncation() {
        let full = chain(20);
        let anchor = ChainAnchor::of(&full).unwrap();
        assert_eq!(verify_audit_chain_anchored(&full, &anchor), ChainVerdict::Intact { len: 20 });
        let mut c = full.clone();
        c.pop();
        assert_eq!(verify_audit_chain_anchored(&c, &anchor), ChainVerdict::Broken { first_bad_seq: 19 });
        c.truncate(4);
        assert_eq!(verify_audit_chain_anchored(&c, &anchor), ChainVerdict::Broken { first_bad_seq: 4 });
        // Growth past the anchor is fine; a forked history is not.
        let longer = chain(25);
        assert!(verify_audit_chain_anchored(&longer, &anchor).is_intact());
        let forked = AuditLog::in_memory();
        for i in 0..20 {
            forked.append(Timestamp::from_secs(5_000 + i), entry(i)).unwrap();
        }
        assert_eq!(
            verify_audit_chain_anchored(&forked.snapshot(), &anchor),
            ChainVerdict::Broken { first_bad_seq: 19 }
        );
    }

    #[test]
    fn file_roundtrip_and_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        {
            let log = AuditLog::open(&path).unwrap();
            for i in 0..5 {
                log.append(Timestamp::from_secs(i), entry(i)).unwrap();
            }
        }
        let v = verify_audit_file(&path).unwrap();
        assert_eq!(v.verdict, ChainVerdict::Intact { len: 5 });
        assert!(!v.truncated_tail);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        let v = verify_audit_file(&path).unwrap();
        assert_eq!(v.verdict, ChainVerdict::Intact { len: 4 });
        assert!(v.truncated_tail);

        let log = AuditLog::open(&path).unwrap();
        assert_eq!(log.len(), 4);
        log.append(Timestamp::from_secs(9), entry(9)).unwrap();
        drop(log);
        let v = verify_audit_file(&path).unwrap();
        assert_eq!(v.verdict, ChainVerdict::Intact { len: 5 });
    }

    #[test]
    fn byte_flip_in_file_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.log");
        let log = AuditLog::open(&path).unwrap();
        for i in 0..10 {
            log.append(Timestamp::from_secs(i), entry(i)).unwrap();
        }
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
        lines[6] = lines[6].replacen("\"timestamp\":6000", "\"timestamp\":6001", 1);
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert_eq!(verify_audit_file(&path).unwrap().verdict, ChainVerdict::Broken { first_bad_seq: 6 });
        assert!(AuditLog::open(&path).is_ok());
        lines[3] = "{not json".into();
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert_eq!(verify_audit_file(&path).unwrap().verdict, ChainVerdict::Broken { first_bad_seq: 3 });
        assert!(matches!(AuditLog::open(&path), Err(AuditError::Corrupt(3))));
    }

    struct Failing;

    impl AuditSink for Failing {
        fn append(&mut self, _: &[u8]) -> io::Result<()> {
            Err(io::Error::other("disk full"))
        }
    }

    #[test]
    fn failed_append_leaves_no_record() {
        let log = AuditLog::with_sink(Box::new(Failing));
        assert!(log.append(Timestamp::from_secs(1), entry(1)).is_err());
        assert!(log.is_empty());
    }

    proptest! {
        #[test]
        fn any_mutation_is_located(n in 2u64..60, k_frac in 0.0f64..1.0, field in 0u8..6) {
            let mut c = chain(n);
            let k = ((n as f64 * k_frac) as usize).min(n as usize - 1);
            let r = &mut c[k];
            match field {
                0 => r.timestamp = r.timestamp.plus_millis(1),
                1 => r.profile_id.push('x'),
                2 => r.operation = AuditOperation::Deny,
                3 => r.outcome = AuditOutcome::Error { kind: "x".into() },
                4 => r.request_digest.0[0] ^= 1,
                _ => r.prev_hash.0[31] ^= 0x80,
            }
            prop_assert_eq!(verify_audit_chain(&c), ChainVerdict::Broken { first_bad_seq: k as u64 });
        }
    }
}
