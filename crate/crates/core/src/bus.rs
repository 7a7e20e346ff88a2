//! Discrete-event model of a half-duplex multi-drop RS-485 line.
//!
//! One master port and any number of slave ports share a single wire. Each
//! transmitted byte occupies the line for one byte time (8N1: 10 bit times)
//! and is delivered to every other attached port when its last bit has been
//! clocked out. Overlapping transmissions collide: receivers see `0xFF` for
//! every byte whose interval overlaps another port's transmission. Per-byte,
//! per-receiver corruption XORs the delivered value with a random nonzero
//! mask.
//!
//! Time is simulated in microseconds and only moves inside [`Bus::advance`]
//! and [`Bus::advance_with`]. Given the same configuration and the same
//! sequence of calls the event trace is identical from run to run.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::io::{self, Write};
use std::ops::ControlFlow;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value receivers see for a byte lost to contention.
pub const COLLISION_BYTE: u8 = 0xFF;
/// Bits on the wire per byte: start + 8 data + stop.
pub const BITS_PER_BYTE: u64 = 10;

pub type PortId = u32;
pub type Micros = u64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("a master port is already attached (port {0})")]
    SecondMaster(PortId),
    #[error("unknown port {0}")]
    UnknownPort(PortId),
    #[error("invalid bus configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusConfig {
    pub baud: u32,
    pub corruption_probability: f64,
    #[serde(alias = "rng_seed")]
    pub seed: u64,
    /// Oldest events are dropped once the retained trace exceeds this many
    /// entries. `None` keeps everything.
    pub trace_limit: Option<usize>,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            baud: 9600,
            corruption_probability: 0.0,
            seed: 0,
            trace_limit: None,
        }
    }
}

impl BusConfig {
    pub fn validate(&self) -> Result<(), BusError> {
        if self.baud == 0 {
            return Err(BusError::InvalidConfig("baud must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption_probability) {
            return Err(BusError::InvalidConfig(format!(
                "corruption_probability {} outside [0, 1]",
                self.corruption_probability
            )));
        }
        Ok(())
    }

    /// Microseconds per byte, rounded to the nearest integer.
    pub fn byte_time_us(&self) -> Micros {
        let baud = u64::from(self.baud.max(1));
        (BITS_PER_BYTE * 1_000_000 + baud / 2) / baud
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortKind {
    Master,
    Slave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ByteSent,
    ByteDelivered,
    ByteCorrupted,
    Collision,
    Attach,
    Detach,
}

impl EventKind {
    pub const fn as_str(self) -> &'static str {
        match self {
            EventKind::ByteSent => "byte_sent",
            EventKind::ByteDelivered => "byte_delivered",
            EventKind::ByteCorrupted => "byte_corrupted",
            EventKind::Collision => "collision",
            EventKind::Attach => "attach",
            EventKind::Detach => "detach",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "byte_sent" => EventKind::ByteSent,
            "byte_delivered" => EventKind::ByteDelivered,
            "byte_corrupted" => EventKind::ByteCorrupted,
            "collision" => EventKind::Collision,
            "attach" => EventKind::Attach,
            "detach" => EventKind::Detach,
            other => return Err(format!("unknown event kind {other:?}")),
        })
    }
}

/// One entry of the bus trace.
///
/// `port_id` is the transmitter for `byte_sent` and `collision`, the receiver
/// for `byte_delivered` and `byte_corrupted`, and the subject port for
/// `attach`/`detach`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BusEvent {
    pub seq: u64,
    pub timestamp_us: Micros,
    pub kind: EventKind,
    pub port_id: PortId,
    pub value: Option<u8>,
}

impl BusEvent {
    /// Trace line `timestamp_us kind port value`, value as `0xNN` or `-`.
    pub fn to_line(&self) -> String {
        match self.value {
            Some(v) => format!(
                "{} {} {} 0x{:02x}",
                self.timestamp_us, self.kind, self.port_id, v
            ),
            None => format!("{} {} {} -", self.timestamp_us, self.kind, self.port_id),
        }
    }

    /// Parses a trace line. The sequence number is not part of the line and
    /// comes back as zero.
    pub fn parse_line(line: &str) -> Result<BusEvent, String> {
        let mut parts = line.split_whitespace();
        let mut next = |what: &str| parts.next().ok_or_else(|| format!("missing {what}"));
        let timestamp_us = next("timestamp")?
            .parse()
            .map_err(|e| format!("bad timestamp: {e}"))?;
        let kind = next("kind")?.parse()?;
        let port_id = next("port")?
            .parse()
            .map_err(|e| format!("bad port: {e}"))?;
        let value = match next("value")? {
            "-" => None,
            v => Some(
                u8::from_str_radix(v.trim_start_matches("0x"), 16)
                    .map_err(|e| format!("bad value: {e}"))?,
            ),
        };
        Ok(BusEvent {
            seq: 0,
            timestamp_us,
            kind,
            port_id,
            value,
        })
    }
}

/// A byte handed to a receiving port during [`Bus::advance_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub timestamp_us: Micros,
    pub port_id: PortId,
    pub from_port: PortId,
    pub value: u8,
}

/// Scheduled transmission, as returned by [`Bus::transmit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransmissionHandle {
    pub id: u64,
    pub port_id: PortId,
    pub start_us: Micros,
    /// End of the last byte's interval on the wire.
    pub end_us: Micros,
}

#[derive(Debug)]
struct Port {
    kind: PortKind,
    rng: ChaCha8Rng,
    tx_busy_until: Micros,
}

#[derive(Debug)]
struct Transmission {
    id: u64,
    port_id: PortId,
    start_us: Micros,
    bytes: Vec<u8>,
    /// Bytes that actually went out; shrinks if the port detaches mid-frame.
    sent_limit: usize,
}

impl Transmission {
    fn byte_start(&self, idx: usize, byte_time: Micros) -> Micros {
        self.start_us + idx as Micros * byte_time
    }

    fn wire_end(&self, byte_time: Micros) -> Micros {
        self.byte_start(self.sent_limit, byte_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    Send { tx: u64, idx: usize },
    Deliver { tx: u64, idx: usize },
}

#[derive(Debug)]
pub struct Bus {
    config: BusConfig,
    byte_time: Micros,
    now: Micros,
    next_port: PortId,
    next_tx: u64,
    next_seq: u64,
    next_order: u64,
    ports: BTreeMap<PortId, Port>,
    transmissions: VecDeque<Transmission>,
    queue: BinaryHeap<Reverse<(Micros, u64, Pending)>>,
    trace: VecDeque<BusEvent>,
    dropped_events: u64,
}

impl Bus {
    pub fn new(config: BusConfig) -> Result<Bus, BusError> {
        config.validate()?;
        Ok(Bus {
            byte_time: config.byte_time_us(),
            config,
            now: 0,
            next_port: 0,
            next_tx: 0,
            next_seq: 0,
            next_order: 0,
            ports: BTreeMap::new(),
            transmissions: VecDeque::new(),
            queue: BinaryHeap::new(),
            trace: VecDeque::new(),
            dropped_events: 0,
        })
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    pub fn byte_time_us(&self) -> Micros {
        self.byte_time
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn attach(&mut self, kind: PortKind) -> Result<PortId, BusError> {
        if kind == PortKind::Master {
            if let Some((&id, _)) = self.ports.iter().find(|(_, p)| p.kind == PortKind::Master) {
                return Err(BusError::SecondMaster(id));
            }
        }
        let id = self.next_port;
        self.next_port += 1;
        // Each receiver draws corruption from its own stream, so adding or
        // removing a port never perturbs what the others see.
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::from(id));
        self.ports.insert(
            id,
            Port {
                kind,
                rng,
                tx_busy_until: 0,
            },
        );
        self.log(EventKind::Attach, id, None);
        Ok(id)
    }

    pub fn detach(&mut self, port_id: PortId) -> Result<(), BusError> {
        if self.ports.remove(&port_id).is_none() {
            return Err(BusError::UnknownPort(port_id));
        }
        // Bytes already on the wire finish; the rest never leave the port.
        let now = self.now;
        let byte_time = self.byte_time;
        for tx in self
            .transmissions
            .iter_mut()
            .filter(|t| t.port_id == port_id)
        {
            let started = if now <= tx.start_us {
                0
            } else {
                (now - tx.start_us).div_ceil(byte_time) as usize
            };
            tx.sent_limit = tx.sent_limit.min(started);
        }
        self.log(EventKind::Detach, port_id, None);
        Ok(())
    }

    pub fn is_attached(&self, port_id: PortId) -> bool {
        self.ports.contains_key(&port_id)
    }

    pub fn port_kind(&self, port_id: PortId) -> Option<PortKind> {
        self.ports.get(&port_id).map(|p| p.kind)
    }

    pub fn attached_ports(&self) -> impl Iterator<Item = PortId> + '_ {
        self.ports.keys().copied()
    }

    /// Queues `bytes` on `port_id` as soon as the port's transmitter is free.
    pub fn transmit(
        &mut self,
        port_id: PortId,
        bytes: &[u8],
    ) -> Result<TransmissionHandle, BusError> {
        self.transmit_at(port_id, bytes, self.now)
    }

    /// Like [`Bus::transmit`], but no earlier than `start_us`.
    pub fn transmit_at(
        &mut self,
        port_id: PortId,
        bytes: &[u8],
        start_us: Micros,
    ) -> Result<TransmissionHandle, BusError> {
        let byte_time = self.byte_time;
        let now = self.now;
        let port = self
            .ports
            .get_mut(&port_id)
            .ok_or(BusError::UnknownPort(port_id))?;
        let start = start_us.max(now).max(port.tx_busy_until);
        let end = start + bytes.len() as Micros * byte_time;
        port.tx_busy_until = end;

        let id = self.next_tx;
        self.next_tx += 1;
        for idx in 0..bytes.len() {
            let at = start + idx as Micros * byte_time;
            self.schedule(at, Pending::Send { tx: id, idx });
            self.schedule(at + byte_time, Pending::Deliver { tx: id, idx });
        }
        self.transmissions.push_back(Transmission {
            id,
            port_id,
            start_us: start,
            bytes: bytes.to_vec(),
            sent_limit: bytes.len(),
        });
        Ok(TransmissionHandle {
            id,
            port_id,
            start_us: start,
            end_us: end,
        })
    }

    /// Time at which every queued byte has been delivered.
    pub fn idle_at(&self) -> Micros {
        self.transmissions
            .iter()
            .map(|t| t.wire_end(self.byte_time))
            .max()
            .unwrap_or(0)
            .max(self.now)
    }

    pub fn next_event_time(&self) -> Option<Micros> {
        self.queue.peek().map(|Reverse((t, _, _))| *t)
    }

    pub fn advance(&mut self, duration_us: Micros) -> Vec<BusEvent> {
        self.advance_with(duration_us, |_, _| ControlFlow::Continue(()))
    }

    /// Runs the clock forward by `duration_us`, handing each delivered byte
    /// to `on_delivery`. The handler may schedule new transmissions through
    /// the `&mut Bus` it receives. Returning [`ControlFlow::Break`] stops the
    /// clock at the current event's timestamp.
    ///
    /// Returns the events logged during the call.
    pub fn advance_with<F>(&mut self, duration_us: Micros, mut on_delivery: F) -> Vec<BusEvent>
    where
        F: FnMut(&mut Bus, Delivery) -> ControlFlow<()>,
    {
        let deadline = self.now.saturating_add(duration_us);
        let first_seq = self.next_seq;
        let mut stopped = false;
        while let Some(&Reverse((at, _, _))) = self.queue.peek() {
            if at > deadline {
                break;
            }
            let Reverse((at, _, pending)) = self.queue.pop().unwrap();
            self.now = at;
            let deliveries = self.fire(pending);
            for d in deliveries {
                if on_delivery(self, d).is_break() {
                    stopped = true;
                }
            }
            if stopped {
                break;
            }
        }
        if !stopped {
            self.now = deadline;
        }
        self.prune();
        self.events_since(first_seq).copied().collect()
    }

    /// Full retained trace, oldest first.
    pub fn trace(&self) -> impl Iterator<Item = &BusEvent> {
        self.trace.iter()
    }

    pub fn trace_len(&self) -> usize {
        self.trace.len()
    }

    /// Events with sequence number `>= seq` still in the retained trace.
    pub fn events_since(&self, seq: u64) -> impl Iterator<Item = &BusEvent> {
        let oldest = self.trace.front().map(|e| e.seq).unwrap_or(self.next_seq);
        let skip = seq.saturating_sub(oldest) as usize;
        self.trace.iter().skip(skip)
    }

    /// Sequence number the next logged event will receive.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Events discarded because of `trace_limit`.
    pub fn dropped_events(&self) -> u64 {
        self.dropped_events
    }

    /// Writes the retained trace as newline-delimited `timestamp_us kind port value` records.
    pub fn export_trace<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in &self.trace {
            writeln!(out, "{}", e.to_line())?;
        }
        Ok(())
    }

    fn schedule(&mut self, at: Micros, pending: Pending) {
        // Ties at the same timestamp fire in scheduling order.
        let order = self.next_order;
        self.next_order += 1;
        self.queue.push(Reverse((at, order, pending)));
    }

    fn find_tx(&self, id: u64) -> Option<&Transmission> {
        self.transmissions.iter().find(|t| t.id == id)
    }

    fn fire(&mut self, pending: Pending) -> Vec<Delivery> {
        match pending {
            Pending::Send { tx, idx } => {
                let Some(t) = self.find_tx(tx) else {
                    return Vec::new();
                };
                if idx >= t.sent_limit {
                    return Vec::new();
                }
                let (port, value) = (t.port_id, t.bytes[idx]);
                self.log(EventKind::ByteSent, port, Some(value));
                Vec::new()
            }
            Pending::Deliver { tx, idx } => self.deliver(tx, idx),
        }
    }

    fn deliver(&mut self, tx_id: u64, idx: usize) -> Vec<Delivery> {
        let byte_time = self.byte_time;
        let Some(t) = self.find_tx(tx_id) else {
            return Vec::new();
        };
        if idx >= t.sent_limit {
            return Vec::new();
        }
        let from = t.port_id;
        let sent = t.bytes[idx];
        let begin = t.byte_start(idx, byte_time);
        let end = begin + byte_time;
        let collided = self.transmissions.iter().any(|o| {
            o.port_id != from
                && o.sent_limit > 0
                && o.start_us < end
                && begin < o.wire_end(byte_time)
        });

        if collided {
            self.log(EventKind::Collision, from, Some(sent));
        }
        let p = self.config.corruption_probability;
        let receivers: Vec<PortId> = self
            .ports
            .keys()
            .copied()
            .filter(|&id| id != from)
            .collect();
        let mut out = Vec::with_capacity(receivers.len());
        for rx in receivers {
            let mut value = if collided { COLLISION_BYTE } else { sent };
            if p > 0.0 {
                let port = self.ports.get_mut(&rx).unwrap();
                if port.rng.random_bool(p) {
                    let mask: u8 = port.rng.random_range(1..=255);
                    value ^= mask;
                    self.log(EventKind::ByteCorrupted, rx, Some(value));
                }
            }
            self.log(EventKind::ByteDelivered, rx, Some(value));
            out.push(Delivery {
                timestamp_us: self.now,
                port_id: rx,
                from_port: from,
                value,
            });
        }
        out
    }

    fn log(&mut self, kind: EventKind, port_id: PortId, value: Option<u8>) {
        let event = BusEvent {
            seq: self.next_seq,
            timestamp_us: self.now,
            kind,
            port_id,
            value,
        };
        self.next_seq += 1;
        self.trace.push_back(event);
        if let Some(limit) = self.config.trace_limit {
            while self.trace.len() > limit {
                self.trace.pop_front();
                self.dropped_events += 1;
            }
        }
    }

    // Drop transmissions that can no longer overlap or deliver anything.
    fn prune(&mut self) {
        let horizon = self.now.saturating_sub(self.byte_time);
        let byte_time = self.byte_time;
        self.transmissions
            .retain(|t| t.wire_end(byte_time) > horizon);
    }
}
