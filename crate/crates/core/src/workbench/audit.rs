//! Append-only JSONL audit trail for one run.
//!
//! Layout under the run directory:
//!
//! - `audit.jsonl`: one [`AuditRecord`] per line, in append order
//! - `prompts/<sha256>.txt`: every prompt sent to a model, content-addressed

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sha256_hex;

pub const AUDIT_FILE: &str = "audit.jsonl";
pub const PROMPTS_DIR: &str = "prompts";

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("run `{0}` is closed")]
    RunClosed(String),
    #[error("audit i/o at {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("audit record at {path}:{line}: {reason}")]
    Corrupt { path: PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditKind {
    LlmCall,
    Retrieval,
    Parse,
    Grounding,
    Score,
    Config,
    Rationale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: AuditKind,
    pub run_id: String,
    pub payload: Value,
}

struct Inner {
    file: Option<(File, PathBuf)>,
    prompts_dir: Option<PathBuf>,
    prompts: BTreeMap<String, String>,
    records: Vec<AuditRecord>,
    closed: bool,
}

/// Thread-safe single-writer log; concurrent callers are serialized.
pub struct AuditLog {
    run_id: String,
    inner: Mutex<Inner>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AuditError + '_ {
    move |source| AuditError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

impl AuditLog {
    /// Opens (creating if needed) the audit trail in `run_dir`, appending to
    /// any existing records.
    pub fn open(run_dir: &Path, run_id: &str) -> Result<Self, AuditError> {
        let prompts_dir = run_dir.join(PROMPTS_DIR);
        fs::create_dir_all(&prompts_dir).map_err(io_err(&prompts_dir))?;
        let path = run_dir.join(AUDIT_FILE);
        let records = if path.exists() { read_records(&path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            run_id: run_id.to_string(),
            inner: Mutex::new(Inner {
                file: Some((file, path)),
                prompts_dir: Some(prompts_dir),
                prompts: BTreeMap::new(),
                records,
                closed: false,
            }),
        })
    }

    /// A log that keeps records and prompts in memory only.
    pub fn in_memory(run_id: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            inner: Mutex::new(Inner {
                file: None,
                prompts_dir: None,
                prompts: BTreeMap::new(),
                records: Vec::new(),
                closed: false,
            }),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Appends a record stamped now; returns its position in the log.
    pub fn record(&self, kind: AuditKind, payload: Value) -> Result<u64, AuditError> {
        self.append(AuditRecord {
            seq: 0,
            timestamp: Utc::now(),
            kind,
            run_id: self.run_id.clone(),
            payload,
        })
    }

    /// Appends `event`, assigning its sequence number. Timestamps are clamped
    /// so they never decrease within the run.
    pub fn append(&self, mut event: AuditRecord) -> Result<u64, AuditError> {
        let mut inner = self.inner.lock().expect("audit lock");
        if inner.closed {
            return Err(AuditError::RunClosed(self.run_id.clone()));
        }
        let seq = inner.records.len() as u64;
        event.seq = seq;
        event.run_id = self.run_id.clone();
        if let Some(last) = inner.records.last() {
            if event.timestamp < last.timestamp {
                event.timestamp = last.timestamp;
            }
        }
        if let Some((file, path)) = inner.file.as_mut() {
            let line = serde_json::to_string(&event).expect("audit records serialize");
            writeln!(file, "{line}").map_err(io_err(path))?;
            file.sync_data().map_err(io_err(path))?;
        }
        inner.records.push(event);
        Ok(seq)
    }

    /// Stores `prompt` under its content hash and returns the hash.
    pub fn store_prompt(&self, prompt: &str) -> Result<String, AuditError> {
        let hash = sha256_hex(prompt);
        let mut inner = self.inner.lock().expect("audit lock");
        if inner.closed {
            return Err(AuditError::RunClosed(self.run_id.clone()));
        }
        if let Some(dir) = &inner.prompts_dir {
            let path = dir.join(format!("{hash}.txt"));
            if !path.exists() {
                fs::write(&path, prompt).map_err(io_err(&path))?;
            }
        }
        inner.prompts.insert(hash.clone(), prompt.to_string());
        Ok(hash)
    }

    pub fn prompt(&self, hash: &str) -> Option<String> {
        self.inner.lock().expect("audit lock").prompts.get(hash).cloned()
    }

    pub fn close(&self) {
        self.inner.lock().expect("audit lock").closed = true;
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.inner.lock().expect("audit lock").records.clone()
    }

    pub fn count(&self, kind: AuditKind) -> usize {
        self.inner
            .lock()
            .expect("audit lock")
            .records
            .iter()
            .filter(|r| r.kind == kind)
            .count()
    }
}

pub fn read_records(path: &Path) -> Result<Vec<AuditRecord>, AuditError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| AuditError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(records)
}

/// Every prompt referenced by `llm-call` records in a run directory, in call
/// order, read back from the content-addressed prompt files.
pub fn reconstruct_prompts(run_dir: &Path) -> Result<Vec<String>, AuditError> {
    let records = read_records(&run_dir.join(AUDIT_FILE))?;
    records
        .iter()
        .filter(|r| r.kind == AuditKind::LlmCall)
        .map(|r| {
            let hash = r.payload["prompt_hash"].as_str().unwrap_or_default();
            let path = run_dir.join(PROMPTS_DIR).join(format!("{hash}.txt"));
            fs::read_to_string(&path).map_err(io_err(&path))
        })
        .collect()
}
