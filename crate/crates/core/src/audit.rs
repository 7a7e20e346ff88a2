//! Append-only audit log of control actions.
//!
//! One JSON object per line. Each entry is serialized up front and written
//! with a single `write_all` on a file opened in append mode, so a reader
//! sees either the whole line or nothing of it.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit storage: {0}")]
    Io(#[from] io::Error),
    #[error("audit record: {0}")]
    Serde(#[from] serde_json::Error),
}

/// What an action was aimed at.
///
/// Serialized as a bare number for a node address, `"broadcast"`, `"N-M"`
/// for an address range, or the block name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditTarget {
    Address(u8),
    Block(String),
    Broadcast,
    Range(u8, u8),
}

impl fmt::Display for AuditTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuditTarget::Address(a) => write!(f, "{a}"),
            AuditTarget::Block(b) => f.write_str(b),
            AuditTarget::Broadcast => f.write_str("broadcast"),
            AuditTarget::Range(lo, hi) => write!(f, "{lo}-{hi}"),
        }
    }
}

impl AuditTarget {
    pub fn parse(s: &str) -> AuditTarget {
        if s == "broadcast" {
            return AuditTarget::Broadcast;
        }
        if let Ok(a) = s.parse::<u8>() {
            return AuditTarget::Address(a);
        }
        if let Some((lo, hi)) = s.split_once('-') {
            if let (Ok(lo), Ok(hi)) = (lo.parse(), hi.parse()) {
                return AuditTarget::Range(lo, hi);
            }
        }
        AuditTarget::Block(s.to_string())
    }
}

impl Serialize for AuditTarget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AuditTarget::Address(a) => s.serialize_u8(*a),
            other => s.collect_str(other),
        }
    }
}

impl<'de> Deserialize<'de> for AuditTarget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct TargetVisitor;

        impl Visitor<'_> for TargetVisitor {
            type Value = AuditTarget;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a node address, block name, range or \"broadcast\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<AuditTarget, E> {
                u8::try_from(v)
                    .map(AuditTarget::Address)
                    .map_err(|_| E::custom(format!("address {v} out of range")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<AuditTarget, E> {
                Ok(AuditTarget::parse(v))
            }
        }

        d.deserialize_any(TargetVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditOutcome {
    Acked,
    Timeout,
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub wall_time: DateTime<Utc>,
    pub actor: String,
    pub target: AuditTarget,
    pub command: String,
    pub outcome: AuditOutcome,
}

impl AuditEntry {
    pub fn now(
        actor: impl Into<String>,
        target: AuditTarget,
        command: impl Into<String>,
        outcome: AuditOutcome,
    ) -> Self {
        AuditEntry {
            wall_time: Utc::now(),
            actor: actor.into(),
            target,
            command: command.into(),
            outcome,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct AuditFilter {
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
    pub actor: Option<String>,
    pub target: Option<String>,
}

impl AuditFilter {
    pub fn matches(&self, e: &AuditEntry) -> bool {
        self.since.is_none_or(|t| e.wall_time >= t)
            && self.until.is_none_or(|t| e.wall_time <= t)
            && self.actor.as_ref().is_none_or(|a| &e.actor == a)
            && self
                .target
                .as_ref()
                .is_none_or(|t| e.target.to_string() == *t)
    }
}

enum Store {
    File { path: PathBuf, file: File },
    Memory(Vec<String>),
}

pub struct AuditLog {
    store: Store,
    appended: u64,
}

impl AuditLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(AuditLog {
            store: Store::File { path, file },
            appended: 0,
        })
    }

    /// Log kept in memory only; for tests and throwaway simulations.
    pub fn in_memory() -> Self {
        AuditLog {
            store: Store::Memory(Vec::new()),
            appended: 0,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.store {
            Store::File { path, .. } => Some(path),
            Store::Memory(_) => None,
        }
    }

    /// Entries appended through this handle.
    pub fn appended(&self) -> u64 {
        self.appended
    }

    pub fn append(&mut self, entry: &AuditEntry) -> Result<(), AuditError> {
        let mut line = serde_json::to_string(entry)?;
        match &mut self.store {
            Store::File { file, .. } => {
                line.push('\n');
                file.write_all(line.as_bytes())?;
                file.flush()?;
            }
            Store::Memory(lines) => lines.push(line),
        }
        self.appended += 1;
        Ok(())
    }

    pub fn query(&self, filter: &AuditFilter) -> Result<Vec<AuditEntry>, AuditError> {
        let mut out = Vec::new();
        match &self.store {
            Store::File { path, .. } => {
                let reader = BufReader::new(File::open(path)?);
                for line in reader.lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: AuditEntry = serde_json::from_str(&line)?;
                    if filter.matches(&entry) {
                        out.push(entry);
                    }
                }
            }
            Store::Memory(lines) => {
                for line in lines {
                    let entry: AuditEntry = serde_json::from_str(line)?;
                    if filter.matches(&entry) {
                        out.push(entry);
                    }
                }
            }
        }
        Ok(out)
    }
}
