//! Shared TOML configuration.
//!
//! ```toml
//! [bus]
//! baud = 9600
//! corruption_probability = 0.0
//! seed = 42
//!
//! [policy]
//! timeout_us = 100000
//! retries = 2
//!
//! [server]
//! bind = "127.0.0.1:8485"
//!
//! [[nodes]]
//! address = 5
//! temp_baseline = 280
//! humid_baseline = 550
//! ```
//!
//! The file is located through `NODEPOWER_CONFIG` when set.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::BusConfig;
use crate::master::TransactionPolicy;
use crate::node::NodeSpec;

pub const CONFIG_ENV: &str = "NODEPOWER_CONFIG";
pub const DEFAULT_CONFIG_PATH: &str = "nodepower.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Background status refresh of registered nodes; off when unset.
    pub poll_interval_ms: Option<u64>,
    pub scan_on_start: bool,
    /// Directory of dashboard files served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1:8485".into(),
            poll_interval_ms: None,
            scan_on_start: true,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    /// Newline-delimited JSON audit log. In-memory when unset.
    pub audit_log: Option<PathBuf>,
    /// Registry and block state. Not persisted when unset.
    pub state_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bus: BusConfig,
    pub policy: TransactionPolicy,
    pub server: ServerConfig,
    pub storage: StorageConfig,
    pub nodes: Vec<NodeSpec>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Config::from_toml(&text)?;
        // Relative storage paths are relative to the config file.
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.storage.audit_log, &mut cfg.storage.state_file]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Explicit path, else `$NODEPOWER_CONFIG`, else `./nodepower.toml` if it
    /// exists, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(p) = explicit {
            return Config::load(p);
        }
        if let Some(p) = std::env::var_os(CONFIG_ENV) {
            return Config::load(Path::new(&p));
        }
        let default = Path::new(DEFAULT_CONFIG_PATH);
        if default.exists() {
            return Config::load(default);
        }
        Ok(Config::default())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.bus
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.policy
            .validate(self.bus.byte_time_us())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for n in &self.nodes {
            if n.address == 0 || n.address == 255 {
                return Err(ConfigError::Invalid(format!(
                    "node address {} is not a unicast address",
                    n.address
                )));
            }
            if n.humid_baseline > crate::node::HUMIDITY_MAX {
                return Err(ConfigError::Invalid(format!(
                    "node {}: humidity baseline {} above 1000",
                    n.address, n.humid_baseline
                )));
            }
        }
        Ok(())
    }
}
