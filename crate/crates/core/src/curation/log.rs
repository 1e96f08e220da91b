use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::actions::{CurationAction, RerunScope};
use super::CurationError;

pub const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub action: CurationAction,
    pub scope: RerunScope,
    pub config_hash_before: String,
    pub config_hash_after: String,
    pub prev_hash: String,
    pub hash: String,
}

#[derive(Serialize)]
struct Unsealed<'a> {
    seq: u64,
    timestamp: &'a DateTime<Utc>,
    action: &'a CurationAction,
    scope: RerunScope,
    config_hash_before: &'a str,
    config_hash_after: &'a str,
    prev_hash: &'a str,
}

impl LogEntry {
    pub fn compute_hash(&self) -> String {
        let body = Unsealed {
            seq: self.seq,
            timestamp: &self.timestamp,
            action: &self.action,
            scope: self.scope,
            config_hash_before: &self.config_hash_before,
            config_hash_after: &self.config_hash_after,
            prev_hash: &self.prev_hash,
        };
        let bytes = serde_json::to_vec(&body).expect("log entry serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Append-only record of applied actions; each entry commits to its
/// predecessor's hash.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationLog {
    pub entries: Vec<LogEntry>,
}

impl CurationLog {
    pub fn head(&self) -> &str {
        self.entries.last().map_or(GENESIS, |e| e.hash.as_str())
    }

    pub fn append(
        &mut self,
        action: CurationAction,
        config_hash_before: &str,
        config_hash_after: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<&LogEntry, CurationError> {
        action.validate()?;
        let mut e = LogEntry {
            seq: self.entries.len() as u64,
            timestamp,
            scope: action.scope(),
            action,
            config_hash_before: config_hash_before.to_string(),
            config_hash_after: config_hash_after.to_string(),
            prev_hash: self.head().to_string(),
            hash: String::new(),
        };
        e.hash = e.compute_hash();
        self.entries.push(e);
        Ok(self.entries.last().expect("just pushed"))
    }

    /// Recomputes every hash and link.
    pub fn verify(&self) -> Result<(), CurationError> {
        let mut prev = GENESIS;
        for (i, e) in self.entries.iter().enumerate() {
            let broken = |reason: &str| CurationError::BrokenChain {
                seq: i as u64,
                reason: reason.to_string(),
            };
            if e.seq != i as u64 {
                return Err(broken("sequence number out of order"));
            }
            if e.prev_hash != prev {
                return Err(broken("predecessor hash does not match"));
            }
            if e.compute_hash() != e.hash {
                return Err(broken("entry hash does not match its contents"));
            }
            prev = &e.hash;
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), CurationError> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|e| CurationError::Format(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Parses and verifies a log.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, CurationError> {
        let mut entries = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries
                .push(serde_json::from_str(&line).map_err(|e| CurationError::Format(format!("line {}: {e}", n + 1)))?);
        }
        let log = Self { entries };
        log.verify()?;
        Ok(log)
    }
}
