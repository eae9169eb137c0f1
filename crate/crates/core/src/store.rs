//! Append-only record stores backing a gate.
//!
//! The file backend writes one line per record:
//! `iport=<name>\t<canonical record json>\n`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{validate_segment, DataRecord};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store unavailable at {path}: {source}")]
    Unavailable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store {path} line {line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
    #[error("write to {path} failed: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoreBackend {
    #[default]
    Memory,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredRecord {
    pub iport: String,
    pub record: DataRecord,
}

pub trait DataStore: Send + Sync {
    fn append(&mut self, iport: &str, records: &[DataRecord]) -> Result<(), StoreError>;

    /// Every record in append order.
    fn scan_all(&self) -> &[StoredRecord];

    fn scan_iport(&self, iport: &str) -> Vec<DataRecord> {
        self.scan_all()
            .iter()
            .filter(|s| s.iport == iport)
            .map(|s| s.record.clone())
            .collect()
    }

    fn len(&self) -> usize {
        self.scan_all().len()
    }

    fn is_empty(&self) -> bool {
        self.scan_all().is_empty()
    }
}

pub fn open_store(backend: &StoreBackend) -> Result<Box<dyn DataStore>, StoreError> {
    Ok(match backend {
        StoreBackend::Memory => Box::new(MemoryStore::default()),
        StoreBackend::File(path) => Box::new(FileStore::open(path)?),
    })
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    records: Vec<StoredRecord>,
}

impl DataStore for MemoryStore {
    fn append(&mut self, iport: &str, records: &[DataRecord]) -> Result<(), StoreError> {
        self.records.extend(records.iter().map(|r| StoredRecord {
            iport: iport.to_string(),
            record: r.clone(),
        }));
        Ok(())
    }

    fn scan_all(&self) -> &[StoredRecord] {
        &self.records
    }
}

#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    file: File,
    records: Vec<StoredRecord>,
}

pub fn encode_line(iport: &str, record: &DataRecord) -> String {
    format!("iport={iport}\t{}\n", record.to_canonical())
}

pub fn decode_line(line: &str) -> Result<StoredRecord, String> {
    let rest = line.strip_prefix("iport=").ok_or("missing iport= prefix")?;
    let (iport, json) = rest.split_once('\t').ok_or("missing tab separator")?;
    validate_segment(iport).map_err(|e| e.to_string())?;
    let record = DataRecord::from_canonical(json).map_err(|e| e.to_string())?;
    Ok(StoredRecord {
        iport: iport.to_string(),
        record,
    })
}

impl FileStore {
    /// Opens or creates the log, replaying existing records. A trailing
    /// unterminated line (torn write) is discarded.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let unavailable = |source| StoreError::Unavailable {
            path: path.to_path_buf(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(unavailable)?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(unavailable)?;
        let mut records = Vec::new();
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        if complete.len() != text.len() {
            log::warn!("discarding torn trailing line in {}", path.display());
            file.set_len(complete.len() as u64).map_err(unavailable)?;
        }
        for (i, line) in complete.lines().enumerate() {
            let rec = decode_line(line).map_err(|reason| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            })?;
            records.push(rec);
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
            records,
        })
    }
}

impl DataStore for FileStore {
    fn append(&mut self, iport: &str, records: &[DataRecord]) -> Result<(), StoreError> {
        let werr = |source| StoreError::Write {
            path: self.path.clone(),
            source,
        };
        let mut w = BufWriter::new(&self.file);
        for r in records {
            w.write_all(encode_line(iport, r).as_bytes()).map_err(werr)?;
        }
        w.flush().map_err(werr)?;
        drop(w);
        self.file.sync_data().map_err(werr)?;
        self.records.extend(records.iter().map(|r| StoredRecord {
            iport: iport.to_string(),
            record: r.clone(),
        }));
        Ok(())
    }

    fn scan_all(&self) -> &[StoredRecord] {
        &self.records
    }
}
