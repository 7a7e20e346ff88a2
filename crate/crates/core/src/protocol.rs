//! Wire format shared by the master controller and the node-controllers.
//!
//! Commands travel as fixed 4-byte frames:
//!
//! ```text
//! +-----+----+----+-----+
//! | STX | DN | DT | ETX |
//! +-----+----+----+-----+
//! ```
//!
//! `DN` is the target device number (0 = broadcast, 1..=254 unicast, 255
//! reserved) and `DT` the command code. Command frames carry no checksum and
//! no escaping, so a reader that loses sync slides forward one byte at a time
//! until a valid frame lines up again (see [`resync_scan`]).
//!
//! Responses use an extended frame:
//!
//! ```text
//! +-----+----+-----------+-----+---------------+-----+-----+
//! | STX | DN | DT | 0x80 | LEN | payload (LEN) | XOR | ETX |
//! +-----+----+-----------+-----+---------------+-----+-----+
//! ```
//!
//! where `XOR` folds every byte from `DN` through the last payload byte.
//! Multi-byte payload values are big-endian.
//!
//! | constant            | value  |
//! |---------------------|--------|
//! | `STX`               | `0x02` |
//! | `ETX`               | `0x03` |
//! | `POWER_ON`          | `0x01` |
//! | `POWER_OFF`         | `0x02` (same value as `STX`) |
//! | `STATUS_QUERY`      | `0x10` |
//! | `READ_TEMPERATURE`  | `0x20` |
//! | `READ_HUMIDITY`     | `0x21` |
//! | response echo flag  | `0x80` |
//! | broadcast `DN`      | `0x00` |
//! | reserved `DN`       | `0xFF` |

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Start-of-transmission marker.
pub const STX: u8 = 0x02;
/// End-of-transmission marker.
pub const ETX: u8 = 0x03;
/// Device number addressing every node-controller at once.
pub const BROADCAST: u8 = 0x00;
/// Device number that no frame may carry.
pub const RESERVED_ADDRESS: u8 = 0xFF;
/// Bit set on the echoed command code of a response.
pub const RESPONSE_FLAG: u8 = 0x80;
/// Largest payload a response frame can carry.
pub const MAX_PAYLOAD: usize = 16;
/// Length of an encoded command frame.
pub const COMMAND_LEN: usize = 4;
/// Bytes in a response frame besides the payload.
pub const RESPONSE_OVERHEAD: usize = 6;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad framing")]
    BadFraming,
    #[error("invalid address {0:#04x}")]
    InvalidAddress(u8),
    #[error("unknown command code {0:#04x}")]
    UnknownCommand(u8),
    #[error("response echo {0:#04x} lacks the response flag")]
    BadEcho(u8),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    PayloadTooLong(usize),
    #[error(
        "length mismatch: frame declares {declared} payload bytes but {actual} bytes were supplied"
    )]
    LengthMismatch { declared: usize, actual: usize },
    #[error("checksum mismatch: computed {computed:#04x}, frame carries {carried:#04x}")]
    ChecksumMismatch { computed: u8, carried: u8 },
}

/// Command code carried in the `DT` byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum CommandCode {
    PowerOn = 0x01,
    PowerOff = 0x02,
    StatusQuery = 0x10,
    ReadTemperature = 0x20,
    ReadHumidity = 0x21,
}

impl CommandCode {
    pub const ALL: [CommandCode; 5] = [
        CommandCode::PowerOn,
        CommandCode::PowerOff,
        CommandCode::StatusQuery,
        CommandCode::ReadTemperature,
        CommandCode::ReadHumidity,
    ];

    pub const fn code(self) -> u8 {
        self as u8
    }

    /// Echo byte a node puts in its response to this command.
    pub const fn echo(self) -> u8 {
        self as u8 | RESPONSE_FLAG
    }

    pub const fn name(self) -> &'static str {
        match self {
            CommandCode::PowerOn => "power_on",
            CommandCode::PowerOff => "power_off",
            CommandCode::StatusQuery => "status_query",
            CommandCode::ReadTemperature => "read_temperature",
            CommandCode::ReadHumidity => "read_humidity",
        }
    }

    pub const fn is_power(self) -> bool {
        matches!(self, CommandCode::PowerOn | CommandCode::PowerOff)
    }
}

impl TryFrom<u8> for CommandCode {
    type Error = ProtocolError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0x01 => Ok(CommandCode::PowerOn),
            0x02 => Ok(CommandCode::PowerOff),
            0x10 => Ok(CommandCode::StatusQuery),
            0x20 => Ok(CommandCode::ReadTemperature),
            0x21 => Ok(CommandCode::ReadHumidity),
            other => Err(ProtocolError::UnknownCommand(other)),
        }
    }
}

impl fmt::Display for CommandCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A 4-byte command frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Frame {
    pub device_number: u8,
    pub command: CommandCode,
}

impl Frame {
    pub const fn new(device_number: u8, command: CommandCode) -> Self {
        Frame {
            device_number,
            command,
        }
    }

    pub const fn broadcast(command: CommandCode) -> Self {
        Frame::new(BROADCAST, command)
    }

    pub const fn is_broadcast(&self) -> bool {
        self.device_number == BROADCAST
    }
}

pub fn encode_command(frame: &Frame) -> Result<[u8; COMMAND_LEN], ProtocolError> {
    if frame.device_number == RESERVED_ADDRESS {
        return Err(ProtocolError::InvalidAddress(frame.device_number));
    }
    Ok([STX, frame.device_number, frame.command.code(), ETX])
}

pub fn decode_command(bytes: [u8; COMMAND_LEN]) -> Result<Frame, ProtocolError> {
    let [stx, device_number, data_type, etx] = bytes;
    if stx != STX || etx != ETX {
        return Err(ProtocolError::BadFraming);
    }
    if device_number == RESERVED_ADDRESS {
        return Err(ProtocolError::InvalidAddress(device_number));
    }
    let command = CommandCode::try_from(data_type)?;
    Ok(Frame {
        device_number,
        command,
    })
}

/// Extended frame a node sends back to the master.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResponseFrame {
    pub device_number: u8,
    pub command: CommandCode,
    pub payload: Vec<u8>,
}

impl ResponseFrame {
    pub fn new(device_number: u8, command: CommandCode, payload: Vec<u8>) -> Self {
        ResponseFrame {
            device_number,
            command,
            payload,
        }
    }

    pub fn ack(device_number: u8, command: CommandCode) -> Self {
        ResponseFrame::new(device_number, command, Vec::new())
    }

    pub fn encoded_len(&self) -> usize {
        RESPONSE_OVERHEAD + self.payload.len()
    }
}

/// XOR fold used as the response checksum.
pub fn xor_checksum(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

pub fn encode_response(resp: &ResponseFrame) -> Result<Vec<u8>, ProtocolError> {
    if resp.payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLong(resp.payload.len()));
    }
    if resp.device_number == BROADCAST || resp.device_number == RESERVED_ADDRESS {
        return Err(ProtocolError::InvalidAddress(resp.device_number));
    }
    let mut out = Vec::with_capacity(resp.encoded_len());
    out.push(STX);
    out.push(resp.device_number);
    out.push(resp.command.echo());
    out.push(resp.payload.len() as u8);
    out.extend_from_slice(&resp.payload);
    out.push(xor_checksum(&out[1..]));
    out.push(ETX);
    Ok(out)
}

/// Decodes one complete response frame.
///
/// Structural checks (markers, length) run before the checksum, and the
/// checksum runs before any semantic check, so a corrupted byte inside an
/// otherwise well-formed frame reports as [`ProtocolError::ChecksumMismatch`].
pub fn decode_response(bytes: &[u8]) -> Result<ResponseFrame, ProtocolError> {
    if bytes.first() != Some(&STX) {
        return Err(ProtocolError::BadFraming);
    }
    if bytes.len() < RESPONSE_OVERHEAD {
        let declared = bytes.get(3).copied().unwrap_or(0) as usize;
        return Err(ProtocolError::LengthMismatch {
            declared,
            actual: bytes.len().saturating_sub(RESPONSE_OVERHEAD),
        });
    }
    let declared = bytes[3] as usize;
    let actual = bytes.len() - RESPONSE_OVERHEAD;
    if declared > MAX_PAYLOAD || declared != actual {
        return Err(ProtocolError::LengthMismatch { declared, actual });
    }
    if bytes[bytes.len() - 1] != ETX {
        return Err(ProtocolError::BadFraming);
    }
    let carried = bytes[bytes.len() - 2];
    let computed = xor_checksum(&bytes[1..bytes.len() - 2]);
    if carried != computed {
        return Err(ProtocolError::ChecksumMismatch { computed, carried });
    }

    let device_number = bytes[1];
    if device_number == BROADCAST || device_number == RESERVED_ADDRESS {
        return Err(ProtocolError::InvalidAddress(device_number));
    }
    let echo = bytes[2];
    if echo & RESPONSE_FLAG == 0 {
        return Err(ProtocolError::BadEcho(echo));
    }
    let command = CommandCode::try_from(echo & !RESPONSE_FLAG)?;
    Ok(ResponseFrame {
        device_number,
        command,
        payload: bytes[4..4 + declared].to_vec(),
    })
}

/// Result of [`resync_scan`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub frames: Vec<(usize, Frame)>,
    /// Bytes passed over without starting a frame.
    pub skipped: usize,
}

/// Greedy left-to-right search for command frames in a raw byte stream.
///
/// At each offset a 4-byte window is decoded; a hit is emitted and the scan
/// jumps past it, a miss advances one byte.
pub fn resync_scan(stream: &[u8]) -> ScanReport {
    let mut report = ScanReport::default();
    let mut offset = 0;
    while offset < stream.len() {
        let frame = stream
            .get(offset..offset + COMMAND_LEN)
            .and_then(|w| decode_command(w.try_into().unwrap()).ok());
        match frame {
            Some(frame) => {
                report.frames.push((offset, frame));
                offset += COMMAND_LEN;
            }
            None => {
                report.skipped += 1;
                offset += 1;
            }
        }
    }
    report
}

/// Incremental response reader for the master side of the bus.
///
/// Bytes are pushed as they arrive; [`ResponseAssembler::poll`] yields each
/// frame candidate once enough bytes are buffered. Failed candidates slide the
/// buffer by one byte.
#[derive(Debug, Default)]
pub struct ResponseAssembler {
    buf: VecDeque<u8>,
    skipped: u64,
}

impl ResponseAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, byte: u8) {
        self.buf.push_back(byte);
    }

    pub fn reset(&mut self) {
        self.buf.clear();
    }

    /// Bytes dropped while hunting for `STX`.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn poll(&mut self) -> Option<Result<ResponseFrame, ProtocolError>> {
        while let Some(&b) = self.buf.front() {
            if b == STX {
                break;
            }
            self.buf.pop_front();
            self.skipped += 1;
        }
        if self.buf.len() < 4 {
            return None;
        }
        let declared = self.buf[3] as usize;
        if declared > MAX_PAYLOAD {
            self.buf.pop_front();
            return Some(Err(ProtocolError::LengthMismatch {
                declared,
                actual: self.buf.len().saturating_sub(RESPONSE_OVERHEAD - 1),
            }));
        }
        let total = RESPONSE_OVERHEAD + declared;
        if self.buf.len() < total {
            return None;
        }
        let candidate: Vec<u8> = self.buf.iter().take(total).copied().collect();
        match decode_response(&candidate) {
            Ok(frame) => {
                self.buf.drain(..total);
                Some(Ok(frame))
            }
            Err(e) => {
                self.buf.pop_front();
                Some(Err(e))
            }
        }
    }
}
