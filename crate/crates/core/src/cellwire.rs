//! Fixed-size link cells and the relay payload framing carried inside them.
//!
//! Every cell on a link is exactly [`CELL_LEN`] bytes:
//!
//! ```text
//! [ circuit_id: u32 ][ command: u8 ][ length: u16 ][ payload: 505 bytes ]
//! ```
//!
//! RELAY cells carry a [`RelayPayload`] that fills the whole payload area:
//!
//! ```text
//! [ recognized: 2 ][ stream_id: u16 ][ digest: 4 ][ data_length: u16 ][ relay_command: u8 ][ data: 494 ]
//! ```
//!
//! All integers are big-endian. Padding bytes are written as zero and ignored on decode.

use thiserror::Error;

/// Encoded size of every cell.
pub const CELL_LEN: usize = 512;
/// Size of the cell header (circuit id, command, length).
pub const CELL_HEADER_LEN: usize = 7;
/// Size of the payload area of a cell.
pub const CELL_PAYLOAD_LEN: usize = CELL_LEN - CELL_HEADER_LEN;
/// Size of the relay payload header.
pub const RELAY_HEADER_LEN: usize = 11;
/// Maximum number of data bytes a single relay payload carries.
pub const RELAY_DATA_LEN: usize = CELL_PAYLOAD_LEN - RELAY_HEADER_LEN;

/// Offset of the digest field inside an encoded relay payload.
pub const RELAY_DIGEST_OFFSET: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("cell buffer must be {CELL_LEN} bytes, got {0}")]
    BadCellSize(usize),
    #[error("relay payload buffer must be {CELL_PAYLOAD_LEN} bytes, got {0}")]
    BadPayloadSize(usize),
    #[error("unknown cell command {0}")]
    UnknownCommand(u8),
    #[error("unknown relay command {0}")]
    UnknownRelayCommand(u8),
    #[error("cell length {0} exceeds {CELL_PAYLOAD_LEN}")]
    CellLengthOverflow(usize),
    #[error("relay data length {0} exceeds {RELAY_DATA_LEN}")]
    RelayDataOverflow(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum CellCommand {
    Create = 1,
    Created = 2,
    Destroy = 3,
    Relay = 4,
}

impl CellCommand {
    pub fn as_str(self) -> &'static str {
        match self {
            CellCommand::Create => "CREATE",
            CellCommand::Created => "CREATED",
            CellCommand::Destroy => "DESTROY",
            CellCommand::Relay => "RELAY",
        }
    }
}

impl TryFrom<u8> for CellCommand {
    type Error = WireError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(CellCommand::Create),
            2 => Ok(CellCommand::Created),
            3 => Ok(CellCommand::Destroy),
            4 => Ok(CellCommand::Relay),
            other => Err(WireError::UnknownCommand(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum RelayCommand {
    Extend = 1,
    Extended = 2,
    Begin = 3,
    Connected = 4,
    Data = 5,
    End = 6,
}

impl RelayCommand {
    pub fn as_str(self) -> &'static str {
        match self {
            RelayCommand::Extend => "EXTEND",
            RelayCommand::Extended => "EXTENDED",
            RelayCommand::Begin => "BEGIN",
            RelayCommand::Connected => "CONNECTED",
            RelayCommand::Data => "DATA",
            RelayCommand::End => "END",
        }
    }
}

impl TryFrom<u8> for RelayCommand {
    type Error = WireError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(RelayCommand::Extend),
            2 => Ok(RelayCommand::Extended),
            3 => Ok(RelayCommand::Begin),
            4 => Ok(RelayCommand::Connected),
            5 => Ok(RelayCommand::Data),
            6 => Ok(RelayCommand::End),
            other => Err(WireError::UnknownRelayCommand(other)),
        }
    }
}

/// A link-level cell. Only the first `length` bytes of `payload` are meaningful.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub circuit_id: u32,
    pub command: CellCommand,
    pub payload: Vec<u8>,
}

impl Cell {
    pub fn new(circuit_id: u32, command: CellCommand, payload: impl Into<Vec<u8>>) -> Self {
        Cell {
            circuit_id,
            command,
            payload: payload.into(),
        }
    }

    pub fn destroy(circuit_id: u32) -> Self {
        Cell::new(circuit_id, CellCommand::Destroy, Vec::new())
    }

    /// RELAY cells always carry a full-width payload so the layer ciphers see every byte.
    pub fn relay(circuit_id: u32, payload: [u8; CELL_PAYLOAD_LEN]) -> Self {
        Cell::new(circuit_id, CellCommand::Relay, payload.to_vec())
    }

    /// The payload as a fixed-width block, zero-padded.
    pub fn payload_block(&self) -> [u8; CELL_PAYLOAD_LEN] {
        let mut block = [0u8; CELL_PAYLOAD_LEN];
        let n = self.payload.len().min(CELL_PAYLOAD_LEN);
        block[..n].copy_from_slice(&self.payload[..n]);
        block
    }
}

pub fn encode_cell(cell: &Cell) -> Result<[u8; CELL_LEN], WireError> {
    let len = cell.payload.len();
    if len > CELL_PAYLOAD_LEN {
        return Err(WireError::CellLengthOverflow(len));
    }
    let mut out = [0u8; CELL_LEN];
    out[0..4].copy_from_slice(&cell.circuit_id.to_be_bytes());
    out[4] = cell.command as u8;
    out[5..7].copy_from_slice(&(len as u16).to_be_bytes());
    out[CELL_HEADER_LEN..CELL_HEADER_LEN + len].copy_from_slice(&cell.payload);
    Ok(out)
}

pub fn decode_cell(buf: &[u8]) -> Result<Cell, WireError> {
    if buf.len() != CELL_LEN {
        return Err(WireError::BadCellSize(buf.len()));
    }
    let circuit_id = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]);
    let command = CellCommand::try_from(buf[4])?;
    let len = u16::from_be_bytes([buf[5], buf[6]]) as usize;
    if len > CELL_PAYLOAD_LEN {
        return Err(WireError::CellLengthOverflow(len));
    }
    Ok(Cell {
        circuit_id,
        command,
        payload: buf[CELL_HEADER_LEN..CELL_HEADER_LEN + len].to_vec(),
    })
}

/// The framing inside a RELAY cell, visible only to the hop that removes the last layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayPayload {
    pub recognized: u16,
    pub stream_id: u16,
    pub digest: [u8; 4],
    pub relay_command: RelayCommand,
    pub data: Vec<u8>,
}

impl RelayPayload {
    pub fn new(relay_command: RelayCommand, stream_id: u16, data: impl Into<Vec<u8>>) -> Self {
        RelayPayload {
            recognized: 0,
            stream_id,
            digest: [0; 4],
            relay_command,
            data: data.into(),
        }
    }
}

pub fn encode_relay_payload(rp: &RelayPayload) -> Result<[u8; CELL_PAYLOAD_LEN], WireError> {
    let len = rp.data.len();
    if len > RELAY_DATA_LEN {
        return Err(WireError::RelayDataOverflow(len));
    }
    let mut out = [0u8; CELL_PAYLOAD_LEN];
    out[0..2].copy_from_slice(&rp.recognized.to_be_bytes());
    out[2..4].copy_from_slice(&rp.stream_id.to_be_bytes());
    out[4..8].copy_from_slice(&rp.digest);
    out[8..10].copy_from_slice(&(len as u16).to_be_bytes());
    out[10] = rp.relay_command as u8;
    out[RELAY_HEADER_LEN..RELAY_HEADER_LEN + len].copy_from_slice(&rp.data);
    Ok(out)
}

pub fn decode_relay_payload(buf: &[u8]) -> Result<RelayPayload, WireError> {
    if buf.len() != CELL_PAYLOAD_LEN {
        return Err(WireError::BadPayloadSize(buf.len()));
    }
    let recognized = u16::from_be_bytes([buf[0], buf[1]]);
    let stream_id = u16::from_be_bytes([buf[2], buf[3]]);
    let digest = [buf[4], buf[5], buf[6], buf[7]];
    let len = u16::from_be_bytes([buf[8], buf[9]]) as usize;
    if len > RELAY_DATA_LEN {
        return Err(WireError::RelayDataOverflow(len));
    }
    let relay_command = RelayCommand::try_from(buf[10])?;
    Ok(RelayPayload {
        recognized,
        stream_id,
        digest,
        relay_command,
        data: buf[RELAY_HEADER_LEN..RELAY_HEADER_LEN + len].to_vec(),
    })
}
