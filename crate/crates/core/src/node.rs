//! Behavioral model of a slave node-controller.
//!
//! A node listens to every byte on the bus, assembles 4-byte command frames
//! and executes those whose device number matches the address set on its DIP
//! switches (or the broadcast address). The DIP bank is read when a frame
//! completes, never cached, so moving a switch takes effect on the next frame.
//! Executing a power command drives the solid-state relay; the three-digit
//! display mirrors the address with the leftmost decimal point lit while the
//! relay is on.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bus::{Bus, BusError, PortId, TransmissionHandle};
use crate::protocol::{
    decode_command, encode_response, CommandCode, Frame, ResponseFrame, BROADCAST, COMMAND_LEN,
    RESERVED_ADDRESS, STX,
};

/// Largest humidity baseline in tenths of %RH.
pub const HUMIDITY_MAX: u16 = 1000;
/// Sensor jitter bound in tenths.
pub const SENSOR_NOISE: i32 = 5;
/// Turnaround between the last byte of a command and the first response byte.
pub const TURNAROUND_BYTES: u64 = 2;

/// Eight-position address switch bank; bit 0 is the least significant switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DipSwitches(u8);

impl DipSwitches {
    pub const fn from_address(address: u8) -> Self {
        DipSwitches(address)
    }

    pub fn from_positions(on: &[u8]) -> Self {
        let mut dip = DipSwitches(0);
        for &bit in on {
            dip.set(bit, true);
        }
        dip
    }

    pub fn set(&mut self, bit: u8, on: bool) {
        assert!(bit < 8, "DIP switch index {bit} out of range");
        if on {
            self.0 |= 1 << bit;
        } else {
            self.0 &= !(1 << bit);
        }
    }

    pub fn toggle(&mut self, bit: u8) {
        assert!(bit < 8, "DIP switch index {bit} out of range");
        self.0 ^= 1 << bit;
    }

    pub fn is_on(&self, bit: u8) -> bool {
        bit < 8 && self.0 & (1 << bit) != 0
    }

    pub fn positions(&self) -> [bool; 8] {
        std::array::from_fn(|i| self.is_on(i as u8))
    }

    pub const fn value(&self) -> u8 {
        self.0
    }
}

/// One seven-segment digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Digit(u8),
    Blank,
}

/// Three-digit seven-segment readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Display {
    pub digits: [Glyph; 3],
    /// Decimal point on the leftmost digit.
    pub decimal_point: bool,
}

impl Display {
    fn for_address(address: u8, relay_on: bool) -> Self {
        let digits = if address == RESERVED_ADDRESS {
            [Glyph::Blank; 3]
        } else {
            [
                Glyph::Digit(address / 100),
                Glyph::Digit(address / 10 % 10),
                Glyph::Digit(address % 10),
            ]
        };
        Display {
            digits,
            decimal_point: relay_on,
        }
    }
}

impl fmt::Display for Display {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, g) in self.digits.iter().enumerate() {
            match g {
                Glyph::Digit(d) => write!(f, "{d}")?,
                Glyph::Blank => f.write_str(" ")?,
            }
            if i == 0 && self.decimal_point {
                f.write_str(".")?;
            }
        }
        Ok(())
    }
}

/// Static description of an emulated node, as found in the config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub address: u8,
    #[serde(default = "default_temp", alias = "temperature_baseline")]
    pub temp_baseline: u16,
    #[serde(default = "default_humid", alias = "humidity_baseline")]
    pub humid_baseline: u16,
    #[serde(default)]
    pub relay_on: bool,
    /// Sensor noise seed; derived from the bus seed and address when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_temp() -> u16 {
    250
}

fn default_humid() -> u16 {
    500
}

impl NodeSpec {
    pub fn new(address: u8) -> Self {
        NodeSpec {
            address,
            temp_baseline: default_temp(),
            humid_baseline: default_humid(),
            relay_on: false,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Valid command frames seen, whatever their address.
    pub frames_seen: u64,
    pub frames_executed: u64,
    /// 4-byte windows that began with STX but did not decode.
    pub malformed: u64,
    /// Bytes dropped while waiting for STX.
    pub noise_bytes: u64,
    pub responses_sent: u64,
}

/// What a node did with a completed frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeAction {
    /// Executed without replying (broadcast).
    Silent(Frame),
    /// Executed and a reply is due on the bus.
    Reply(Frame, ResponseFrame),
}

impl NodeAction {
    pub fn frame(&self) -> &Frame {
        match self {
            NodeAction::Silent(f) | NodeAction::Reply(f, _) => f,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeState {
    pub dip: DipSwitches,
    pub relay_on: bool,
    pub temperature_baseline: u16,
    humidity_baseline: u16,
    rx_buffer: Vec<u8>,
    rng: ChaCha8Rng,
    diagnostics: Diagnostics,
}

impl NodeState {
    pub fn new(spec: &NodeSpec, seed: u64) -> Self {
        NodeState {
            dip: DipSwitches::from_address(spec.address),
            relay_on: spec.relay_on,
            temperature_baseline: spec.temp_baseline,
            humidity_baseline: spec.humid_baseline.min(HUMIDITY_MAX),
            rx_buffer: Vec::with_capacity(COMMAND_LEN),
            rng: ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(seed)),
            diagnostics: Diagnostics::default(),
        }
    }

    pub fn humidity_baseline(&self) -> u16 {
        self.humidity_baseline
    }

    pub fn set_humidity_baseline(&mut self, tenths: u16) {
        self.humidity_baseline = tenths.min(HUMIDITY_MAX);
    }

    /// Current switch setting. Called for every completed frame.
    pub fn read_dip(&self) -> u8 {
        self.dip.value()
    }

    pub fn display(&self) -> Display {
        Display::for_address(self.read_dip(), self.relay_on)
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    pub fn pending_bytes(&self) -> &[u8] {
        &self.rx_buffer
    }

    /// Feeds one received byte. Returns the action taken if the byte
    /// completed a frame addressed to this node.
    pub fn on_byte(&mut self, byte: u8) -> Option<NodeAction> {
        if self.rx_buffer.is_empty() && byte != STX {
            self.diagnostics.noise_bytes += 1;
            return None;
        }
        self.rx_buffer.push(byte);
        if self.rx_buffer.len() < COMMAND_LEN {
            return None;
        }

        let window: [u8; COMMAND_LEN] = self.rx_buffer[..].try_into().unwrap();
        match decode_command(window) {
            Ok(frame) => {
                self.rx_buffer.clear();
                self.diagnostics.frames_seen += 1;
                self.dispatch(frame)
            }
            Err(_) => {
                self.diagnostics.malformed += 1;
                self.rx_buffer.remove(0);
                while let Some(&b) = self.rx_buffer.first() {
                    if b == STX {
                        break;
                    }
                    self.rx_buffer.remove(0);
                    self.diagnostics.noise_bytes += 1;
                }
                None
            }
        }
    }

    fn dispatch(&mut self, frame: Frame) -> Option<NodeAction> {
        let address = self.read_dip();
        if frame.device_number == BROADCAST {
            self.diagnostics.frames_executed += 1;
            self.execute(frame.command);
            return Some(NodeAction::Silent(frame));
        }
        if frame.device_number != address {
            return None;
        }
        self.diagnostics.frames_executed += 1;
        let resp = self.execute(frame.command);
        Some(NodeAction::Reply(frame, resp))
    }

    /// Runs a command already known to be addressed here and builds the reply.
    pub fn execute(&mut self, command: CommandCode) -> ResponseFrame {
        let address = self.read_dip();
        let payload = match command {
            CommandCode::PowerOn => {
                self.relay_on = true;
                Vec::new()
            }
            CommandCode::PowerOff => {
                self.relay_on = false;
                Vec::new()
            }
            CommandCode::StatusQuery => vec![u8::from(self.relay_on)],
            CommandCode::ReadTemperature => {
                let v = self.sample(self.temperature_baseline, u16::MAX);
                v.to_be_bytes().to_vec()
            }
            CommandCode::ReadHumidity => {
                let v = self.sample(self.humidity_baseline, HUMIDITY_MAX);
                v.to_be_bytes().to_vec()
            }
        };
        ResponseFrame::new(address, command, payload)
    }

    fn sample(&mut self, baseline: u16, max: u16) -> u16 {
        let jitter = self.rng.random_range(-SENSOR_NOISE..=SENSOR_NOISE);
        (i32::from(baseline) + jitter).clamp(0, i32::from(max)) as u16
    }
}

/// A node state machine plugged into a bus port.
#[derive(Debug, Clone)]
pub struct NodeController {
    pub state: NodeState,
    port: Option<PortId>,
}

impl NodeController {
    pub fn new(state: NodeState) -> Self {
        NodeController { state, port: None }
    }

    pub fn port(&self) -> Option<PortId> {
        self.port
    }

    pub fn plug(&mut self, bus: &mut Bus) -> Result<PortId, BusError> {
        if let Some(p) = self.port.filter(|&p| bus.is_attached(p)) {
            return Ok(p);
        }
        let p = bus.attach(crate::bus::PortKind::Slave)?;
        self.port = Some(p);
        Ok(p)
    }

    pub fn unplug(&mut self, bus: &mut Bus) -> Result<(), BusError> {
        match self.port.take() {
            Some(p) => bus.detach(p),
            None => Ok(()),
        }
    }

    /// Schedules `response` on this node's port two byte times after now,
    /// which is the delivery time of the command's final byte.
    pub fn respond_after(
        &mut self,
        bus: &mut Bus,
        response: &ResponseFrame,
    ) -> Result<TransmissionHandle, BusError> {
        let port = self.port.ok_or(BusError::UnknownPort(PortId::MAX))?;
        let bytes = encode_response(response).expect("node built an invalid response");
        let at = bus.now() + TURNAROUND_BYTES * bus.byte_time_us();
        let handle = bus.transmit_at(port, &bytes, at)?;
        self.state.diagnostics.responses_sent += 1;
        Ok(handle)
    }
}
