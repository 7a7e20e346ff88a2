//! Request/response transactions driven from the master port.
//!
//! Only the master starts traffic, and it never starts a new command before
//! the previous one has been answered or has timed out. Node replies are the
//! only other transmissions on the line, so with distinct addresses the bus
//! never carries two transmitters at once.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{BusError, Micros};
use crate::network::Network;
use crate::node::TURNAROUND_BYTES;
use crate::protocol::{encode_command, CommandCode, Frame, ProtocolError, COMMAND_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransactionPolicy {
    /// Listening window per attempt, measured from the first command byte.
    pub timeout_us: Micros,
    pub retries: u32,
    /// Quiet time required on the master's receiver before a retry.
    pub inter_retry_gap_us: Micros,
}

impl Default for TransactionPolicy {
    fn default() -> Self {
        TransactionPolicy {
            timeout_us: 100_000,
            retries: 2,
            inter_retry_gap_us: 10_000,
        }
    }
}

impl TransactionPolicy {
    /// Policy used by bus scans: one retry and a window sized to the longest
    /// reply at the given byte time, with some slack.
    pub fn fast(byte_time_us: Micros) -> Self {
        TransactionPolicy {
            timeout_us: minimum_window(byte_time_us) * 2,
            retries: 1,
            inter_retry_gap_us: 2 * byte_time_us,
        }
    }

    pub fn validate(&self, byte_time_us: Micros) -> Result<(), MasterError> {
        let floor = minimum_window(byte_time_us);
        if self.timeout_us <= floor {
            return Err(MasterError::PolicyTooTight {
                timeout_us: self.timeout_us,
                floor_us: floor,
            });
        }
        Ok(())
    }
}

/// Command frame + turnaround + largest possible response.
pub fn minimum_window(byte_time_us: Micros) -> Micros {
    let reply = crate::protocol::RESPONSE_OVERHEAD + crate::protocol::MAX_PAYLOAD;
    (COMMAND_LEN as Micros + TURNAROUND_BYTES + reply as Micros) * byte_time_us
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MasterError {
    #[error("invalid address {0}: must be within 1..=254")]
    InvalidAddress(u16),
    #[error("master port is not attached to the bus")]
    BusDetached,
    #[error("{0} cannot be broadcast")]
    NotBroadcastable(CommandCode),
    #[error("timeout {timeout_us} us does not cover a full exchange ({floor_us} us)")]
    PolicyTooTight {
        timeout_us: Micros,
        floor_us: Micros,
    },
    #[error(transparent)]
    Bus(#[from] BusError),
}

/// Checks a unicast target address.
pub fn check_address(address: u16) -> Result<u8, MasterError> {
    match u8::try_from(address) {
        Ok(a) if (1..=254).contains(&a) => Ok(a),
        _ => Err(MasterError::InvalidAddress(address)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "payload")]
pub enum Outcome {
    Acked(Vec<u8>),
    Timeout,
}

impl Outcome {
    pub fn is_acked(&self) -> bool {
        matches!(self, Outcome::Acked(_))
    }

    pub fn payload(&self) -> Option<&[u8]> {
        match self {
            Outcome::Acked(p) => Some(p),
            Outcome::Timeout => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub frame: Frame,
    pub outcome: Outcome,
    pub attempts: u32,
    pub started_us: Micros,
    pub finished_us: Micros,
}

/// Counters for everything the master rejected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultStats {
    pub bad_framing: u64,
    pub length_mismatch: u64,
    pub checksum_mismatch: u64,
    /// Decoded fine but failed semantic checks (address, echo, command).
    pub invalid_response: u64,
    /// Valid response that did not answer the outstanding command.
    pub foreign_response: u64,
    pub retries: u64,
    pub timeouts: u64,
}

impl FaultStats {
    fn record(&mut self, e: &ProtocolError) {
        match e {
            ProtocolError::BadFraming => self.bad_framing += 1,
            ProtocolError::LengthMismatch { .. } | ProtocolError::PayloadTooLong(_) => {
                self.length_mismatch += 1
            }
            ProtocolError::ChecksumMismatch { .. } => self.checksum_mismatch += 1,
            ProtocolError::InvalidAddress(_)
            | ProtocolError::UnknownCommand(_)
            | ProtocolError::BadEcho(_) => self.invalid_response += 1,
        }
    }
}

/// Owner of the master port. All bus traffic the master originates goes
/// through here, one transaction at a time.
pub struct Master {
    net: Network,
    stats: FaultStats,
}

impl Master {
    pub fn new(net: Network) -> Self {
        Master {
            net,
            stats: FaultStats::default(),
        }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn stats(&self) -> FaultStats {
        self.stats
    }

    pub fn now(&self) -> Micros {
        self.net.now()
    }

    // Let anything still on the wire finish, then require a quiet gap.
    fn settle(&mut self, gap_us: Micros) {
        let idle = self.net.bus().idle_at();
        let now = self.net.now();
        if idle > now {
            self.net.advance(idle - now + gap_us);
        }
        if let Some(last) = self.net.last_master_rx() {
            let quiet = last + gap_us;
            let now = self.net.now();
            if quiet > now {
                self.net.advance(quiet - now);
            }
        }
    }

    /// Sends one unicast command and waits for its reply, retrying on silence
    /// or on an invalid reply.
    pub fn send_command(
        &mut self,
        address: u8,
        command: CommandCode,
        policy: &TransactionPolicy,
    ) -> Result<Transaction, MasterError> {
        let address = check_address(u16::from(address))?;
        if self.net.master_port().is_none() {
            return Err(MasterError::BusDetached);
        }
        let frame = Frame::new(address, command);
        let bytes = encode_command(&frame).expect("address already checked");

        self.settle(policy.inter_retry_gap_us);
        let started_us = self.net.now();
        let mut attempts = 0;
        let mut outcome = Outcome::Timeout;
        while attempts <= policy.retries {
            if attempts > 0 {
                self.stats.retries += 1;
                self.settle(policy.inter_retry_gap_us);
            }
            attempts += 1;
            self.net.reset_master_rx();
            let window_start = self.net.now();
            self.net.transmit_from_master(&bytes)?;
            let window_end = window_start + policy.timeout_us;

            let stats = &mut self.stats;
            let mut reply = None;
            self.net.run(window_end - window_start, |_, r| match r {
                Ok(resp) if resp.device_number == address && resp.command == command => {
                    reply = Some(resp.payload);
                    ControlFlow::Break(())
                }
                Ok(_) => {
                    stats.foreign_response += 1;
                    ControlFlow::Continue(())
                }
                Err(e) => {
                    stats.record(&e);
                    ControlFlow::Continue(())
                }
            });
            if let Some(payload) = reply {
                outcome = Outcome::Acked(payload);
                break;
            }
        }
        if outcome == Outcome::Timeout {
            self.stats.timeouts += 1;
        }
        Ok(Transaction {
            frame,
            outcome,
            attempts,
            started_us,
            finished_us: self.net.now(),
        })
    }

    /// Sends a DN=0 power command once. Nobody answers; the transaction ends
    /// once every node has had the turnaround time to act on it.
    pub fn broadcast(&mut self, command: CommandCode) -> Result<Transaction, MasterError> {
        if !command.is_power() {
            return Err(MasterError::NotBroadcastable(command));
        }
        if self.net.master_port().is_none() {
            return Err(MasterError::BusDetached);
        }
        let frame = Frame::broadcast(command);
        let bytes = encode_command(&frame).expect("broadcast frame is always valid");
        self.settle(0);
        let started_us = self.net.now();
        let handle = self.net.transmit_from_master(&bytes)?;
        let done = handle.end_us + TURNAROUND_BYTES * self.net.byte_time_us();
        self.net.advance(done - started_us);
        Ok(Transaction {
            frame,
            outcome: Outcome::Acked(Vec::new()),
            attempts: 1,
            started_us,
            finished_us: self.net.now(),
        })
    }
}
