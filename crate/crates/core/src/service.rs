//! Operator-facing control layer on top of [`Master`].
//!
//! Keeps the node registry in step with what the bus reports, applies block
//! operations node by node, and writes one audit entry per mutating call.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditEntry, AuditError, AuditFilter, AuditLog, AuditOutcome, AuditTarget};
use crate::bus::BusConfig;
use crate::config::Config;
use crate::master::{
    check_address, FaultStats, Master, MasterError, Outcome, Transaction, TransactionPolicy,
};
use crate::network::{Network, NodeId};
use crate::node::DipSwitches;
use crate::protocol::{CommandCode, Frame, BROADCAST};
use crate::registry::{Block, PowerStatus, Registry, RegistryError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Master(#[from] MasterError),
    #[error("unknown block {0:?}")]
    UnknownBlock(String),
    #[error("no emulated node with index {0}")]
    UnknownNode(NodeId),
    #[error("scan range {from}..={to} is outside 1..=254")]
    InvalidRange { from: u16, to: u16 },
    #[error("{0} reading timed out")]
    SensorTimeout(SensorLeg),
    #[error("{leg} reading carried {len} payload bytes, expected 2")]
    MalformedPayload { leg: SensorLeg, len: usize },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl ServiceError {
    /// Short machine-readable code, used in API error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Master(MasterError::InvalidAddress(_))
            | ServiceError::Registry(RegistryError::InvalidAddress(_)) => "invalid-address",
            ServiceError::Master(MasterError::BusDetached) => "bus-detached",
            ServiceError::Master(MasterError::NotBroadcastable(_)) => "non-broadcastable",
            ServiceError::Master(_) => "bus-error",
            ServiceError::UnknownBlock(_)
            | ServiceError::Registry(RegistryError::UnknownBlock(_)) => "unknown-block",
            ServiceError::Registry(RegistryError::InvalidBlockName(_)) => "invalid-block-name",
            ServiceError::UnknownNode(_) => "unknown-node",
            ServiceError::InvalidRange { .. } => "invalid-range",
            ServiceError::SensorTimeout(_) => "timeout",
            ServiceError::MalformedPayload { .. } => "malformed-payload",
            ServiceError::Registry(_) => "storage-io",
            ServiceError::Audit(_) => "storage-io",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorLeg {
    Temperature,
    Humidity,
}

impl fmt::Display for SensorLeg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SensorLeg::Temperature => "temperature",
            SensorLeg::Humidity => "humidity",
        })
    }
}

/// Sensor values in tenths of a degree Celsius and tenths of %RH.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorReading {
    pub address: u8,
    pub temperature: u16,
    pub humidity: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeOutcome {
    pub address: u8,
    #[serde(flatten)]
    pub outcome: Outcome,
}

/// Delivery bookkeeping derived from what nodes actually executed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryStats {
    pub transactions: u64,
    /// Executions of a frame whose device number differs from the one the
    /// master sent, i.e. the address byte was corrupted on the way.
    pub misdeliveries: u64,
    /// Executions by the intended node of a command code other than the one
    /// sent.
    pub command_corruptions: u64,
    /// Executions of a unicast frame by a node whose DIP address differs
    /// from the frame's device number. Must stay zero.
    pub address_violations: u64,
}

pub struct MasterService {
    master: Master,
    registry: Registry,
    audit: AuditLog,
    policy: TransactionPolicy,
    state_file: Option<PathBuf>,
    delivery: DeliveryStats,
}

fn power_command(on: bool) -> CommandCode {
    if on {
        CommandCode::PowerOn
    } else {
        CommandCode::PowerOff
    }
}

impl MasterService {
    pub fn new(master: Master, policy: TransactionPolicy, audit: AuditLog) -> Self {
        MasterService {
            master,
            registry: Registry::new(),
            audit,
            policy,
            state_file: None,
            delivery: DeliveryStats::default(),
        }
    }

    /// Builds the simulated bus, its nodes and storage from a config.
    pub fn from_config(config: &Config) -> Result<Self, ServiceError> {
        let net = Network::new(config.bus.clone(), &config.nodes).map_err(MasterError::from)?;
        let audit = match &config.storage.audit_log {
            Some(p) => AuditLog::open(p)?,
            None => AuditLog::in_memory(),
        };
        let mut svc = MasterService::new(Master::new(net), config.policy, audit);
        if let Some(p) = &config.storage.state_file {
            svc.registry = Registry::load(p)?;
            svc.state_file = Some(p.clone());
        }
        Ok(svc)
    }

    /// Convenience constructor for a bus of default nodes at `addresses`.
    pub fn simulated(bus: BusConfig, addresses: &[u8]) -> Result<Self, ServiceError> {
        let nodes: Vec<_> = addresses
            .iter()
            .map(|&a| crate::node::NodeSpec::new(a))
            .collect();
        let net = Network::new(bus, &nodes).map_err(MasterError::from)?;
        Ok(MasterService::new(
            Master::new(net),
            TransactionPolicy::default(),
            AuditLog::in_memory(),
        ))
    }

    pub fn master(&self) -> &Master {
        &self.master
    }

    pub fn master_mut(&mut self) -> &mut Master {
        &mut self.master
    }

    pub fn network(&self) -> &Network {
        self.master.network()
    }

    pub fn network_mut(&mut self) -> &mut Network {
        self.master.network_mut()
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn policy(&self) -> &TransactionPolicy {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: TransactionPolicy) {
        self.policy = policy;
    }

    pub fn fault_stats(&self) -> FaultStats {
        self.master.stats()
    }

    pub fn delivery_stats(&self) -> DeliveryStats {
        self.delivery
    }

    pub fn audit_query(
        &self,
        filter: &AuditFilter,
    ) -> Result<Vec<crate::audit::AuditEntry>, ServiceError> {
        Ok(self.audit.query(filter)?)
    }

    fn save_state(&self) -> Result<(), ServiceError> {
        if let Some(p) = &self.state_file {
            self.registry.save(p)?;
        }
        Ok(())
    }

    fn record(
        &mut self,
        actor: &str,
        target: AuditTarget,
        command: &str,
        outcome: AuditOutcome,
    ) -> Result<(), ServiceError> {
        self.audit
            .append(&AuditEntry::now(actor, target, command, outcome))?;
        Ok(())
    }

    fn account(&mut self, sent: Frame) {
        self.delivery.transactions += 1;
        for e in self.master.network_mut().drain_journal() {
            if e.frame.device_number != sent.device_number {
                self.delivery.misdeliveries += 1;
            } else if e.frame.command != sent.command {
                self.delivery.command_corruptions += 1;
            }
            if e.frame.device_number != BROADCAST && e.frame.device_number != e.address {
                self.delivery.address_violations += 1;
            }
        }
    }

    /// One unicast transaction with registry bookkeeping but no audit entry.
    pub fn transact(
        &mut self,
        address: u16,
        command: CommandCode,
        policy: &TransactionPolicy,
    ) -> Result<Transaction, ServiceError> {
        let address = check_address(address)?;
        let tx = self.master.send_command(address, command, policy)?;
        self.account(tx.frame);
        if let Outcome::Acked(payload) = &tx.outcome {
            let status = match command {
                CommandCode::PowerOn => Some(PowerStatus::On),
                CommandCode::PowerOff => Some(PowerStatus::Off),
                CommandCode::StatusQuery => match payload.as_slice() {
                    [0] => Some(PowerStatus::Off),
                    [1] => Some(PowerStatus::On),
                    _ => None,
                },
                _ => None,
            };
            self.registry.observe(address, status, tx.finished_us);
        }
        Ok(tx)
    }

    /// Audited unicast command with the default policy.
    pub fn send_command(
        &mut self,
        actor: &str,
        address: u16,
        command: CommandCode,
    ) -> Result<Transaction, ServiceError> {
        let target = check_address(address)?;
        let policy = self.policy;
        let result = self.transact(address, command, &policy);
        let outcome = match &result {
            Ok(tx) if tx.outcome.is_acked() => AuditOutcome::Acked,
            Ok(_) => AuditOutcome::Timeout,
            Err(e) => AuditOutcome::Error(e.to_string()),
        };
        self.record(actor, AuditTarget::Address(target), command.name(), outcome)?;
        if result.is_ok() {
            self.save_state()?;
        }
        result
    }

    pub fn power(
        &mut self,
        actor: &str,
        address: u16,
        on: bool,
    ) -> Result<Transaction, ServiceError> {
        self.send_command(actor, address, power_command(on))
    }

    /// Queries relay state; read-only, so not audited.
    pub fn status(&mut self, address: u16) -> Result<Transaction, ServiceError> {
        let policy = self.policy;
        self.transact(address, CommandCode::StatusQuery, &policy)
    }

    pub fn broadcast(
        &mut self,
        actor: &str,
        command: CommandCode,
    ) -> Result<Transaction, ServiceError> {
        if !command.is_power() {
            return Err(MasterError::NotBroadcastable(command).into());
        }
        let result = self.master.broadcast(command);
        let outcome = match &result {
            Ok(tx) => {
                self.account(tx.frame);
                // Nobody acknowledges a broadcast; the registry assumes it landed.
                let status = PowerStatus::from_relay(command == CommandCode::PowerOn);
                for a in self.registry.addresses() {
                    self.registry.entry(a).last_status = status;
                }
                AuditOutcome::Acked
            }
            Err(e) => AuditOutcome::Error(e.to_string()),
        };
        self.record(actor, AuditTarget::Broadcast, command.name(), outcome)?;
        self.save_state()?;
        Ok(result?)
    }

    /// Polls every address in `from..=to` with a short policy. Responders are
    /// recorded, silent addresses dropped from the registry.
    pub fn scan_bus(&mut self, actor: &str, from: u16, to: u16) -> Result<Vec<u8>, ServiceError> {
        if from > to {
            return Ok(Vec::new());
        }
        if from < 1 || to > 254 {
            return Err(ServiceError::InvalidRange { from, to });
        }
        let fast = TransactionPolicy::fast(self.master.network().byte_time_us());
        let mut responders = Vec::new();
        let mut failure = None;
        for a in from..=to {
            match self.transact(a, CommandCode::StatusQuery, &fast) {
                Ok(tx) if tx.outcome.is_acked() => responders.push(a as u8),
                Ok(_) => {
                    self.registry.remove(a as u8);
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let outcome = match &failure {
            None => AuditOutcome::Acked,
            Some(e) => AuditOutcome::Error(e.to_string()),
        };
        self.record(
            actor,
            AuditTarget::Range(from as u8, to as u8),
            "scan",
            outcome,
        )?;
        self.save_state()?;
        match failure {
            Some(e) => Err(e),
            None => Ok(responders),
        }
    }

    pub fn define_block(
        &mut self,
        actor: &str,
        name: &str,
        nodes: &[u16],
    ) -> Result<Block, ServiceError> {
        let result = self.registry.define_block(name, nodes);
        if result.is_ok() {
            let outcome = AuditOutcome::Acked;
            self.record(
                actor,
                AuditTarget::Block(name.to_string()),
                "define_block",
                outcome,
            )?;
            self.save_state()?;
        }
        Ok(result?)
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.registry.blocks()
    }

    /// Powers each member of a block in turn. One member failing does not
    /// stop the others.
    pub fn power_block(
        &mut self,
        actor: &str,
        name: &str,
        on: bool,
    ) -> Result<Vec<NodeOutcome>, ServiceError> {
        let block = self
            .registry
            .block(name)
            .ok_or_else(|| ServiceError::UnknownBlock(name.to_string()))?;
        let command = power_command(on);
        let policy = self.policy;
        let mut results = Vec::with_capacity(block.nodes.len());
        let mut failure = None;
        for &a in &block.nodes {
            match self.transact(u16::from(a), command, &policy) {
                Ok(tx) => results.push(NodeOutcome {
                    address: a,
                    outcome: tx.outcome,
                }),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let acked = results.iter().filter(|r| r.outcome.is_acked()).count();
        let outcome = if let Some(e) = &failure {
            AuditOutcome::Error(e.to_string())
        } else if acked == results.len() {
            AuditOutcome::Acked
        } else if acked == 0 {
            AuditOutcome::Timeout
        } else {
            let silent: Vec<String> = results
                .iter()
                .filter(|r| !r.outcome.is_acked())
                .map(|r| r.address.to_string())
                .collect();
            AuditOutcome::Error(format!(
                "partial: {acked} of {} acked, timed out: {}",
                results.len(),
                silent.join(",")
            ))
        };
        self.record(
            actor,
            AuditTarget::Block(name.to_string()),
            command.name(),
            outcome,
        )?;
        self.save_state()?;
        match failure {
            Some(e) => Err(e),
            None => Ok(results),
        }
    }

    fn read_leg(&mut self, address: u16, leg: SensorLeg) -> Result<u16, ServiceError> {
        let command = match leg {
            SensorLeg::Temperature => CommandCode::ReadTemperature,
            SensorLeg::Humidity => CommandCode::ReadHumidity,
        };
        let policy = self.policy;
        let tx = self.transact(address, command, &policy)?;
        match tx.outcome {
            Outcome::Acked(p) => match p.as_slice() {
                &[hi, lo] => Ok(u16::from_be_bytes([hi, lo])),
                other => Err(ServiceError::MalformedPayload {
                    leg,
                    len: other.len(),
                }),
            },
            Outcome::Timeout => Err(ServiceError::SensorTimeout(leg)),
        }
    }

    pub fn read_sensors(&mut self, address: u16) -> Result<SensorReading, ServiceError> {
        let a = check_address(address)?;
        let temperature = self.read_leg(address, SensorLeg::Temperature)?;
        let humidity = self.read_leg(address, SensorLeg::Humidity)?;
        Ok(SensorReading {
            address: a,
            temperature,
            humidity,
        })
    }

    /// Unplugs or replugs an emulated node by index. Audited against the
    /// node's DIP address at the time of the change.
    pub fn set_plugged(
        &mut self,
        actor: &str,
        node: NodeId,
        plugged: bool,
    ) -> Result<(), ServiceError> {
        let net = self.master.network_mut();
        let address = net
            .node(node)
            .ok_or(ServiceError::UnknownNode(node))?
            .state
            .read_dip();
        let result = if plugged {
            net.plug(node).map(|_| ())
        } else {
            net.unplug(node)
        };
        let outcome = match &result {
            Ok(()) => AuditOutcome::Acked,
            Err(e) => AuditOutcome::Error(e.to_string()),
        };
        let command = if plugged { "plug" } else { "unplug" };
        self.record(actor, AuditTarget::Address(address), command, outcome)?;
        result.map_err(|e| MasterError::from(e).into())
    }

    /// Moves a node's DIP switches to `address`. The node picks it up on its
    /// next completed frame.
    pub fn set_dip(&mut self, actor: &str, node: NodeId, address: u8) -> Result<(), ServiceError> {
        let ctl = self
            .master
            .network_mut()
            .node_mut(node)
            .ok_or(ServiceError::UnknownNode(node))?;
        let old = ctl.state.read_dip();
        ctl.state.dip = DipSwitches::from_address(address);
        let command = format!("set_dip:{address}");
        self.record(
            actor,
            AuditTarget::Address(old),
            &command,
            AuditOutcome::Acked,
        )
    }

    /// Refreshes the relay status of every registered node.
    pub fn poll_registered(&mut self) -> Result<(), ServiceError> {
        for a in self.registry.addresses() {
            self.status(u16::from(a))?;
        }
        self.save_state()
    }
}
