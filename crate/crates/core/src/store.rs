//! The memory bank of Intent-Experience-Utility triplets and its durable
//! journal.
//!
//! Every mutation is expressed as a [`JournalRecord`]. A live store writes the
//! record to its journal first and only then applies it to the in-memory bank,
//! and replay applies the same records through the same code path, so a
//! replayed bank is field-for-field identical to the live one.
//!
//! Journal: UTF-8 JSON lines, `{"op":"insert"|"update","seq":n,...}`.
//! Snapshot: one JSON document `{dim, next_id, last_seq, triplets}`; replay
//! skips journal records whose `seq` is already covered by the snapshot.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{MemrlError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeLabel {
    Success,
    Failure,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryTriplet {
    pub id: u64,
    pub intent_text: String,
    pub intent_embedding: EmbeddingVector,
    pub experience: String,
    pub utility: f64,
    pub outcome_label: OutcomeLabel,
    pub update_count: u64,
    pub created_at: u64,
}

/// One journaled mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum JournalRecord {
    Insert {
        seq: u64,
        id: u64,
        intent_text: String,
        intent_embedding: EmbeddingVector,
        experience: String,
        utility: f64,
        outcome_label: OutcomeLabel,
    },
    Update {
        seq: u64,
        id: u64,
        new_q: f64,
    },
}

impl JournalRecord {
    pub fn seq(&self) -> u64 {
        match self {
            JournalRecord::Insert { seq, .. } | JournalRecord::Update { seq, .. } => *seq,
        }
    }
}

/// In-memory bank. Iteration order is insertion order, which is also id order.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    triplets: Vec<MemoryTriplet>,
    index: HashMap<u64, usize>,
    next_id: u64,
    last_seq: u64,
}

impl MemoryBank {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            triplets: Vec::new(),
            index: HashMap::new(),
            next_id: 1,
            last_seq: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn triplets(&self) -> &[MemoryTriplet] {
        &self.triplets
    }

    pub fn get(&self, id: u64) -> Option<&MemoryTriplet> {
        self.index.get(&id).map(|&i| &self.triplets[i])
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index.contains_key(&id)
    }

    fn check_dim(&self, embedding: &EmbeddingVector) -> Result<()> {
        if embedding.dim() != self.dim {
            return Err(MemrlError::InvalidDimension {
                expected: self.dim,
                actual: embedding.dim(),
            });
        }
        Ok(())
    }

    fn prepare_insert(
        &self,
        intent_text: &str,
        intent_embedding: &EmbeddingVector,
        experience: &str,
        q_init: f64,
        outcome_label: OutcomeLabel,
    ) -> Result<JournalRecord> {
        self.check_dim(intent_embedding)?;
        if !q_init.is_finite() {
            return Err(MemrlError::invalid("q_init must be finite"));
        }
        Ok(JournalRecord::Insert {
            seq: self.last_seq + 1,
            id: self.next_id,
            intent_text: intent_text.to_owned(),
            intent_embedding: intent_embedding.clone(),
            experience: experience.to_owned(),
            utility: q_init,
            outcome_label,
        })
    }

    fn prepare_updates(&self, updates: &[(u64, f64)]) -> Result<Vec<JournalRecord>> {
        let mut seq = self.last_seq;
        updates
            .iter()
            .map(|&(id, new_q)| {
                if !self.contains(id) {
                    return Err(MemrlError::NotFound(id));
                }
                if !new_q.is_finite() {
                    return Err(MemrlError::invalid(format!(
                        "utility for memory {id} must be finite"
                    )));
                }
                seq += 1;
                Ok(JournalRecord::Update { seq, id, new_q })
            })
            .collect()
    }

    /// Applies a record. Returns the previous utility for updates.
    pub fn apply(&mut self, record: JournalRecord) -> Result<Option<f64>> {
        let seq = record.seq();
        if seq != self.last_seq + 1 {
            return Err(MemrlError::invalid(format!(
                "record seq {seq} does not follow {}",
                self.last_seq
            )));
        }
        let previous = match record {
            JournalRecord::Insert {
                seq,
                id,
                intent_text,
                intent_embedding,
                experience,
                utility,
                outcome_label,
            } => {
                self.check_dim(&intent_embedding)?;
                if id < self.next_id || self.index.contains_key(&id) {
                    return Err(MemrlError::invalid(format!("id {id} reused")));
                }
                if !utility.is_finite() {
                    return Err(MemrlError::invalid("non-finite utility"));
                }
                self.index.insert(id, self.triplets.len());
                self.triplets.push(MemoryTriplet {
                    id,
                    intent_text,
                    intent_embedding,
                    experience,
                    utility,
                    outcome_label,
                    update_count: 0,
                    created_at: seq,
                });
                self.next_id = id + 1;
                None
            }
            JournalRecord::Update { id, new_q, .. } => {
                if !new_q.is_finite() {
                    return Err(MemrlError::invalid("non-finite utility"));
                }
                let &i = self.index.get(&id).ok_or(MemrlError::NotFound(id))?;
                let t = &mut self.triplets[i];
                let old = t.utility;
                t.utility = new_q;
                t.update_count += 1;
                Some(old)
            }
        };
        self.last_seq = seq;
        Ok(previous)
    }
}

/// Serialized bank state used for compaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub dim: usize,
    pub next_id: u64,
    pub last_seq: u64,
    pub triplets: Vec<MemoryTriplet>,
}

impl Snapshot {
    pub fn of(bank: &MemoryBank) -> Self {
        Self {
            dim: bank.dim,
            next_id: bank.next_id,
            last_seq: bank.last_seq,
            triplets: bank.triplets.clone(),
        }
    }

    pub fn into_bank(self) -> Result<MemoryBank> {
        let mut bank = MemoryBank::new(self.dim);
        let mut last_id = 0;
        for t in self.triplets {
            if t.intent_embedding.dim() != self.dim {
                return Err(MemrlError::InvalidDimension {
                    expected: self.dim,
                    actual: t.intent_embedding.dim(),
                });
            }
            if t.id <= last_id || t.id >= self.next_id {
                return Err(MemrlError::invalid("snapshot ids out of order"));
            }
            if !t.utility.is_finite() {
                return Err(MemrlError::invalid("snapshot has non-finite utility"));
            }
            last_id = t.id;
            bank.index.insert(t.id, bank.triplets.len());
            bank.triplets.push(t);
        }
        bank.next_id = self.next_id;
        bank.last_seq = self.last_seq;
        Ok(bank)
    }
}

/// Writes a snapshot atomically (temp file + rename).
pub fn write_snapshot(bank: &MemoryBank, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        serde_json::to_writer(&mut f, &Snapshot::of(bank))
            .map_err(|e| MemrlError::Persistence(io::Error::other(e)))?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let raw = fs::read(path)?;
    serde_json::from_slice(&raw).map_err(|e| MemrlError::Corrupt {
        offset: 0,
        reason: format!("snapshot {}: {e}", path.display()),
    })
}

/// Result of replaying a journal.
#[derive(Debug)]
pub struct Replay {
    pub bank: MemoryBank,
    /// Number of bytes of the journal that were applied (or skipped as already
    /// covered by the snapshot).
    pub valid_bytes: u64,
    /// Set when replay stopped early: byte offset of the first bad record.
    pub stopped_at: Option<u64>,
    pub stop_reason: Option<String>,
}

/// Rebuilds a bank from an optional snapshot plus the journal suffix.
///
/// A missing journal file is treated as empty. A malformed, truncated or
/// out-of-sequence record stops replay; the bank then reflects every record
/// before it and `stopped_at` holds that record's byte offset.
pub fn replay(journal: &Path, snapshot: Option<&Path>, dim: usize) -> Result<Replay> {
    let mut bank = match snapshot {
        Some(p) if p.exists() => {
            let snap = read_snapshot(p)?;
            if snap.dim != dim {
                return Err(MemrlError::InvalidDimension {
                    expected: dim,
                    actual: snap.dim,
                });
            }
            snap.into_bank()?
        }
        _ => MemoryBank::new(dim),
    };
    let file = match File::open(journal) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Ok(Replay {
                bank,
                valid_bytes: 0,
                stopped_at: None,
                stop_reason: None,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut offset = 0u64;
    let mut line = Vec::new();
    let mut stop = None;
    loop {
        line.clear();
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            break;
        }
        if line.last() != Some(&b'\n') {
            stop = Some((offset, "truncated record".to_owned()));
            break;
        }
        let record: JournalRecord = match serde_json::from_slice(&line) {
            Ok(r) => r,
            Err(e) => {
                stop = Some((offset, e.to_string()));
                break;
            }
        };
        if record.seq() > bank.last_seq {
            match bank.apply(record) {
                Ok(_) => {}
                // a well-formed record of another width means the caller has
                // the wrong config, not that the journal is damaged
                Err(e @ MemrlError::InvalidDimension { .. }) => return Err(e),
                Err(e) => {
                    stop = Some((offset, e.to_string()));
                    break;
                }
            }
        }
        offset += n as u64;
    }
    if let Some((at, reason)) = &stop {
        tracing::warn!(offset = at, %reason, journal = %journal.display(), "journal replay stopped early");
    }
    let (stopped_at, stop_reason) = match stop {
        Some((a, r)) => (Some(a), Some(r)),
        None => (None, None),
    };
    Ok(Replay {
        bank,
        valid_bytes: offset,
        stopped_at,
        stop_reason,
    })
}

/// Append-only record sink.
pub struct Journal {
    sink: Box<dyn Write + Send + Sync>,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal").finish_non_exhaustive()
    }
}

impl Journal {
    pub fn new(sink: Box<dyn Write + Send + Sync>) -> Self {
        Self { sink }
    }

    /// Writes all records as one buffer and flushes.
    pub fn append(&mut self, records: &[JournalRecord]) -> Result<()> {
        let mut buf = Vec::with_capacity(128 * records.len());
        for r in records {
            serde_json::to_writer(&mut buf, r)
                .map_err(|e| MemrlError::Persistence(io::Error::other(e)))?;
            buf.push(b'\n');
        }
        self.sink.write_all(&buf)?;
        self.sink.flush()?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.sink.flush()?;
        Ok(())
    }
}

/// A bank plus its (optional) journal. Mutations are journaled before they are
/// applied; a failed journal write leaves the bank untouched.
#[derive(Debug)]
pub struct MemoryStore {
    bank: MemoryBank,
    journal: Option<Journal>,
    journal_path: Option<PathBuf>,
}

/// Snapshot path paired with a journal path: `<journal>.snapshot.json`.
pub fn snapshot_path_for(journal: &Path) -> PathBuf {
    let mut name = journal.as_os_str().to_owned();
    name.push(".snapshot.json");
    PathBuf::from(name)
}

impl MemoryStore {
    /// Volatile store with no journal.
    pub fn in_memory(dim: usize) -> Self {
        Self {
            bank: MemoryBank::new(dim),
            journal: None,
            journal_path: None,
        }
    }

    /// Store journaling to an arbitrary writer.
    pub fn with_journal(bank: MemoryBank, sink: Box<dyn Write + Send + Sync>) -> Self {
        Self {
            bank,
            journal: Some(Journal::new(sink)),
            journal_path: None,
        }
    }

    /// Opens (or creates) a file-backed store, replaying the snapshot and the
    /// journal. A corrupt tail is cut off so new records follow valid ones.
    pub fn open(journal_path: &Path, dim: usize) -> Result<(Self, Replay)> {
        let snap = snapshot_path_for(journal_path);
        let replayed = replay(journal_path, Some(&snap), dim)?;
        if let Some(parent) = journal_path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(journal_path)?;
        if replayed.stopped_at.is_some() {
            file.set_len(replayed.valid_bytes)?;
        }
        let store = Self {
            bank: replayed.bank.clone(),
            journal: Some(Journal::new(Box::new(file))),
            journal_path: Some(journal_path.to_owned()),
        };
        Ok((store, replayed))
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn dim(&self) -> usize {
        self.bank.dim
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryTriplet> {
        self.bank.get(id)
    }

    fn commit(&mut self, records: Vec<JournalRecord>) -> Result<Vec<Option<f64>>> {
        if let Some(journal) = self.journal.as_mut() {
            journal.append(&records)?;
        }
        records.into_iter().map(|r| self.bank.apply(r)).collect()
    }

    /// Appends a new triplet with `utility = q_init` and returns its id.
    pub fn insert_triplet(
        &mut self,
        intent_text: &str,
        intent_embedding: &EmbeddingVector,
        experience: &str,
        q_init: f64,
        outcome_label: OutcomeLabel,
    ) -> Result<u64> {
        let record =
            self.bank
                .prepare_insert(intent_text, intent_embedding, experience, q_init, outcome_label)?;
        let id = self.bank.next_id;
        self.commit(vec![record])?;
        Ok(id)
    }

    /// Replaces one utility and returns the previous value.
    pub fn update_utility(&mut self, id: u64, new_q: f64) -> Result<f64> {
        Ok(self.update_utilities(&[(id, new_q)])?[0])
    }

    /// Replaces several utilities as one unit: either every id exists and all
    /// records are journaled, or nothing changes.
    pub fn update_utilities(&mut self, updates: &[(u64, f64)]) -> Result<Vec<f64>> {
        let records = self.bank.prepare_updates(updates)?;
        let previous = self.commit(records)?;
        Ok(previous.into_iter().map(|p| p.unwrap_or(f64::NAN)).collect())
    }

    pub fn flush(&mut self) -> Result<()> {
        match self.journal.as_mut() {
            Some(j) => j.flush(),
            None => Ok(()),
        }
    }

    /// Writes a snapshot next to the journal and truncates the journal.
    pub fn compact(&mut self) -> Result<PathBuf> {
        let path = self
            .journal_path
            .clone()
            .ok_or_else(|| MemrlError::invalid("compaction needs a file-backed journal"))?;
        self.flush()?;
        let snap = snapshot_path_for(&path);
        write_snapshot(&self.bank, &snap)?;
        let file = OpenOptions::new()
            .write(true)
            .truncate(true)
            .open(&path)?;
        drop(file);
        let file = OpenOptions::new().append(true).open(&path)?;
        self.journal = Some(Journal::new(Box::new(file)));
        Ok(snap)
    }
}
