//! Power control for cluster nodes over a shared RS-485 line.
//!
//! A master controller addresses node-controllers with 4-byte
//! `STX DN DT ETX` frames. Each node-controller takes its address from a DIP
//! switch bank, switches its node's supply through a solid-state relay and
//! can report temperature and humidity. This crate holds the wire codec
//! ([`protocol`]), a deterministic simulation of the bus ([`bus`]), the node
//! emulator ([`node`]), and the master side: transactions ([`master`]),
//! registry, audit log and the operator-level [`service`].

pub mod audit;
pub mod bus;
pub mod config;
pub mod master;
pub mod network;
pub mod node;
pub mod protocol;
pub mod registry;
pub mod service;

pub use bus::{Bus, BusConfig, BusEvent, EventKind, PortId, PortKind};
pub use master::{Master, MasterError, Outcome, Transaction, TransactionPolicy};
pub use network::Network;
pub use node::{NodeSpec, NodeState};
pub use protocol::{CommandCode, Frame, ProtocolError, ResponseFrame};
pub use service::{MasterService, ServiceError};
