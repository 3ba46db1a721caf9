//! In-process message passing between clients and the server.
//!
//! Every message is framed as `type u8 | round u32 | client u32 | body`.
//! Client-to-server traffic is restricted by type to parameter checkpoints
//! and style-statistics records; there is no variant that could carry raw
//! samples. A meter counts body bytes per direction.

use serde::Serialize;

use crate::error::{Error, Result};

pub const FRAME_HEADER_LEN: usize = 1 + 4 + 4;

const TAG_CHECKPOINT: u8 = 1;
const TAG_STATS: u8 = 2;
const TAG_BROADCAST: u8 = 3;
const TAG_BANK: u8 = 4;

/// Everything a client may send to the server.
#[derive(Clone, Debug, PartialEq)]
pub enum ClientMessage {
    /// Locally trained parameters in checkpoint format.
    Checkpoint(Vec<u8>),
    /// Encoded style-statistics records.
    Stats(Vec<u8>),
}

/// Everything the server sends to a client.
#[derive(Clone, Debug, PartialEq)]
pub enum ServerMessage {
    /// Global parameters in checkpoint format.
    Broadcast(Vec<u8>),
    /// Redistributed style-statistics records.
    Bank(Vec<u8>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

/// One entry of the transport log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub direction: Direction,
    pub kind: &'static str,
    pub round: u32,
    pub client: u32,
    pub body_bytes: usize,
}

/// Cumulative body bytes per direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ByteMeter {
    pub up: u64,
    pub down: u64,
    /// Portion of `up` carrying style statistics.
    pub stats_up: u64,
}

/// Frame header fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub tag: u8,
    pub round: u32,
    pub client: u32,
}

fn frame(tag: u8, round: u32, client: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + body.len());
    out.push(tag);
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&client.to_le_bytes());
    out.extend_from_slice(body);
    out
}

fn unframe(bytes: &[u8]) -> Result<(FrameHeader, &[u8])> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "frame shorter than its header".into(),
        });
    }
    let header = FrameHeader {
        tag: bytes[0],
        round: u32::from_le_bytes(bytes[1..5].try_into().unwrap()),
        client: u32::from_le_bytes(bytes[5..9].try_into().unwrap()),
    };
    Ok((header, &bytes[FRAME_HEADER_LEN..]))
}

/// The simulated network. Keeps the meter and the audit log.
#[derive(Debug, Default)]
pub struct Transport {
    meter: ByteMeter,
    audit: Vec<AuditEntry>,
}

impl Transport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meter(&self) -> ByteMeter {
        self.meter
    }

    pub fn audit(&self) -> &[AuditEntry] {
        &self.audit
    }

    fn log(&mut self, direction: Direction, kind: &'static str, round: u32, client: u32, n: usize) {
        match direction {
            Direction::Up => self.meter.up += n as u64,
            Direction::Down => self.meter.down += n as u64,
        }
        self.audit.push(AuditEntry {
            direction,
            kind,
            round,
            client,
            body_bytes: n,
        });
    }

    /// Frames and meters a client upload.
    pub fn send_up(&mut self, round: u32, client: u32, msg: &ClientMessage) -> Vec<u8> {
        let (tag, kind, body) = match msg {
            ClientMessage::Checkpoint(b) => (TAG_CHECKPOINT, "checkpoint", b),
            ClientMessage::Stats(b) => (TAG_STATS, "stats", b),
        };
        if tag == TAG_STATS {
            self.meter.stats_up += body.len() as u64;
        }
        self.log(Direction::Up, kind, round, client, body.len());
        frame(tag, round, client, body)
    }

    /// Decodes a frame received by the server; unknown types are rejected.
    pub fn receive_up(bytes: &[u8]) -> Result<(FrameHeader, ClientMessage)> {
        let (h, body) = unframe(bytes)?;
        let msg = match h.tag {
            TAG_CHECKPOINT => ClientMessage::Checkpoint(body.to_vec()),
            TAG_STATS => ClientMessage::Stats(body.to_vec()),
            t => {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("message type {t} is not allowed from a client"),
                })
            }
        };
        Ok((h, msg))
    }

    /// Frames and meters a server message.
    pub fn send_down(&mut self, round: u32, client: u32, msg: &ServerMessage) -> Vec<u8> {
        let (tag, kind, body) = match msg {
            ServerMessage::Broadcast(b) => (TAG_BROADCAST, "broadcast", b),
            ServerMessage::Bank(b) => (TAG_BANK, "bank", b),
        };
        self.log(Direction::Down, kind, round, client, body.len());
        frame(tag, round, client, body)
    }

    pub fn receive_down(bytes: &[u8]) -> Result<(FrameHeader, ServerMessage)> {
        let (h, body) = unframe(bytes)?;
        let msg = match h.tag {
            TAG_BROADCAST => ServerMessage::Broadcast(body.to_vec()),
            TAG_BANK => ServerMessage::Bank(body.to_vec()),
            t => {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("message type {t} is not a server message"),
                })
            }
        };
        Ok((h, msg))
    }
}
