//! Master-side view of the node population and block allocations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::Micros;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("invalid address {0}: must be within 1..=254")]
    InvalidAddress(u16),
    #[error("invalid block name {0:?}")]
    InvalidBlockName(String),
    #[error("unknown block {0:?}")]
    UnknownBlock(String),
    #[error("state file: {0}")]
    Io(#[from] io::Error),
    #[error("state file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerStatus {
    #[default]
    Unknown,
    On,
    Off,
}

impl PowerStatus {
    pub fn from_relay(on: bool) -> Self {
        if on {
            PowerStatus::On
        } else {
            PowerStatus::Off
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub address: u8,
    #[serde(default)]
    pub block: Option<String>,
    #[serde(default)]
    pub last_status: PowerStatus,
    /// Simulated bus time of the last valid reply.
    #[serde(default)]
    pub last_seen_us: Option<Micros>,
    #[serde(default)]
    pub labels: Vec<String>,
}

impl NodeRecord {
    pub fn new(address: u8) -> Self {
        NodeRecord {
            address,
            block: None,
            last_status: PowerStatus::Unknown,
            last_seen_us: None,
            labels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub nodes: Vec<u8>,
}

/// Nodes keyed by address plus named blocks. A node belongs to at most one
/// block; block membership outlives the node record so a block still lists a
/// member that stopped answering.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    nodes: BTreeMap<u8, NodeRecord>,
    blocks: BTreeMap<String, BTreeSet<u8>>,
}

pub fn validate_block_name(name: &str) -> Result<(), RegistryError> {
    let ok = name.len() <= 64
        && name.starts_with(|c: char| c.is_ascii_alphabetic())
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        && name != "broadcast";
    if ok {
        Ok(())
    } else {
        Err(RegistryError::InvalidBlockName(name.to_string()))
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        match fs::read_to_string(path) {
            Ok(text) => Ok(serde_json::from_str(&text)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Registry::new()),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes the registry as pretty JSON, replacing the file atomically.
    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn get(&self, address: u8) -> Option<&NodeRecord> {
        self.nodes.get(&address)
    }

    pub fn records(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn addresses(&self) -> Vec<u8> {
        self.nodes.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn block_of(&self, address: u8) -> Option<String> {
        self.blocks
            .iter()
            .find(|(_, members)| members.contains(&address))
            .map(|(name, _)| name.clone())
    }

    pub fn entry(&mut self, address: u8) -> &mut NodeRecord {
        let block = self.block_of(address);
        self.nodes.entry(address).or_insert_with(|| NodeRecord {
            block,
            ..NodeRecord::new(address)
        })
    }

    /// Records a valid reply from `address` at bus time `at_us`.
    pub fn observe(&mut self, address: u8, status: Option<PowerStatus>, at_us: Micros) {
        let rec = self.entry(address);
        rec.last_seen_us = Some(at_us);
        if let Some(s) = status {
            rec.last_status = s;
        }
    }

    pub fn remove(&mut self, address: u8) -> Option<NodeRecord> {
        self.nodes.remove(&address)
    }

    pub fn set_labels(&mut self, address: u8, labels: Vec<String>) {
        self.entry(address).labels = labels;
    }

    /// Creates or replaces a block. Members leave whatever block they were in.
    pub fn define_block(&mut self, name: &str, members: &[u16]) -> Result<Block, RegistryError> {
        validate_block_name(name)?;
        let mut set = BTreeSet::new();
        for &m in members {
            match u8::try_from(m) {
                Ok(a) if (1..=254).contains(&a) => {
                    set.insert(a);
                }
                _ => return Err(RegistryError::InvalidAddress(m)),
            }
        }
        if let Some(old) = self.blocks.remove(name) {
            for a in old {
                if let Some(rec) = self.nodes.get_mut(&a) {
                    rec.block = None;
                }
            }
        }
        for members in self.blocks.values_mut() {
            members.retain(|a| !set.contains(a));
        }
        for &a in &set {
            if let Some(rec) = self.nodes.get_mut(&a) {
                rec.block = Some(name.to_string());
            }
        }
        self.blocks.insert(name.to_string(), set);
        Ok(self.block(name).expect("just inserted"))
    }

    pub fn block(&self, name: &str) -> Option<Block> {
        self.blocks.get(name).map(|m| Block {
            name: name.to_string(),
            nodes: m.iter().copied().collect(),
        })
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.blocks
            .iter()
            .map(|(name, m)| Block {
                name: name.clone(),
                nodes: m.iter().copied().collect(),
            })
            .collect()
    }
}
