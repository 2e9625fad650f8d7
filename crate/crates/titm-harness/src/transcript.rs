//! The on-disk transcript format: a versioned, length-prefixed frame log.
//!
//! A transcript file holds the wire bytes of one or more runs, one section
//! per scenario, in delivery order. Only observable bytes are stored — no
//! timestamps, paths, or anything else that varies between hosts — so two
//! runs with the same seed write byte-identical files.

use std::fs;
use std::path::Path;

use thiserror::Error;

use titm::wire::{Reader, WireError, Writer};

use crate::sim::TranscriptEntry;

const MAGIC: &[u8; 4] = b"TIMT";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("cannot access {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("transcript file malformed")]
    Malformed,
    #[error("transcript version {0} is not supported")]
    Version(u8),
}

impl From<WireError> for TranscriptError {
    fn from(_: WireError) -> TranscriptError {
        TranscriptError::Malformed
    }
}

/// One recorded wire crossing, as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredEntry {
    pub tick: u64,
    pub from: String,
    pub to: String,
    pub sealed: bool,
    pub wire: Vec<u8>,
}

impl From<&TranscriptEntry> for StoredEntry {
    fn from(entry: &TranscriptEntry) -> StoredEntry {
        StoredEntry {
            tick: entry.tick,
            from: entry.from.clone(),
            to: entry.to.clone(),
            sealed: entry.sealed,
            wire: entry.wire.clone(),
        }
    }
}

/// One scenario's worth of entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub outcome: String,
    pub entries: Vec<StoredEntry>,
}

/// A whole transcript file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TranscriptFile {
    pub seed: u64,
    pub sections: Vec<Section>,
}

impl TranscriptFile {
    pub fn new(seed: u64) -> TranscriptFile {
        TranscriptFile { seed, sections: Vec::new() }
    }

    pub fn push(&mut self, name: &str, outcome: &str, entries: &[TranscriptEntry]) {
        self.sections.push(Section {
            name: name.to_string(),
            outcome: outcome.to_string(),
            entries: entries.iter().map(StoredEntry::from).collect(),
        });
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(MAGIC);
        w.u8(VERSION);
        w.u64(self.seed);
        w.u32(self.sections.len() as u32);
        for section in &self.sections {
            w.str(&section.name);
            w.str(&section.outcome);
            w.u32(section.entries.len() as u32);
            for entry in &section.entries {
                w.u64(entry.tick);
                w.str(&entry.from);
                w.str(&entry.to);
                w.u8(entry.sealed as u8);
                w.bytes(&entry.wire);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<TranscriptFile, TranscriptError> {
        let mut r = Reader::new(bytes);
        if r.raw(4)? != MAGIC {
            return Err(TranscriptError::Malformed);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(TranscriptError::Version(version));
        }
        let seed = r.u64()?;
        let section_count = r.u32()?;
        let mut sections = Vec::with_capacity(section_count as usize);
        for _ in 0..section_count {
            let name = r.str()?;
            let outcome = r.str()?;
            let entry_count = r.u32()?;
            let mut entries = Vec::with_capacity(entry_count as usize);
            for _ in 0..entry_count {
                entries.push(StoredEntry {
                    tick: r.u64()?,
                    from: r.str()?,
                    to: r.str()?,
                    sealed: r.u8()? != 0,
                    wire: r.bytes()?,
                });
            }
            sections.push(Section { name, outcome, entries });
        }
        r.finish()?;
        Ok(TranscriptFile { seed, sections })
    }

    pub fn save(&self, path: &Path) -> Result<(), TranscriptError> {
        fs::write(path, self.encode()).map_err(|e| TranscriptError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<TranscriptFile, TranscriptError> {
        let bytes = fs::read(path).map_err(|e| TranscriptError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        TranscriptFile::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TranscriptFile {
        let mut file = TranscriptFile::new(7);
        file.sections.push(Section {
            name: "honest-end-to-end".into(),
            outcome: "flow_succeeds".into(),
            entries: vec![
                StoredEntry {
                    tick: 0,
                    from: "client".into(),
                    to: "proxy".into(),
                    sealed: false,
                    wire: vec![1, 2, 3],
                },
                StoredEntry {
                    tick: 1,
                    from: "proxy".into(),
                    to: "bank".into(),
                    sealed: true,
                    wire: vec![9; 40],
                },
            ],
        });
        file
    }

    #[test]
    fn round_trips_exactly() {
        let file = sample();
        let decoded = TranscriptFile::decode(&file.encode()).unwrap();
        assert_eq!(decoded, file);
    }

    #[test]
    fn rejects_wrong_magic_and_future_versions() {
        let mut bytes = sample().encode();
        bytes[0] ^= 0xFF;
        assert!(matches!(TranscriptFile::decode(&bytes), Err(TranscriptError::Malformed)));

        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(matches!(TranscriptFile::decode(&bytes), Err(TranscriptError::Version(9))));
    }

    #[test]
    fn rejects_trailing_garbage() {
        let mut bytes = sample().encode();
        bytes.push(0);
        assert!(matches!(TranscriptFile::decode(&bytes), Err(TranscriptError::Malformed)));
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.bin");
        sample().save(&path).unwrap();
        assert_eq!(TranscriptFile::load(&path).unwrap(), sample());
    }
}
