//! Canonical binary encoding of envelopes.
//!
//! Layout, all little-endian:
//!
//! ```text
//! kind:u8 | seq:u64 | sender:u32 | receiver:u32 | timestamp:f64 | payload_len:u32 | payload
//! ```
//!
//! Kind tags 0..=3 are simulation messages; 16.. are control traffic. The
//! controller's address is `u32::MAX`. Control messages reuse the header
//! fields: `seq` holds the GVT round and `timestamp` the reported/broadcast
//! value.

use std::fmt;

use thiserror::Error;

use crate::messages::{
    Address, Control, Envelope, LpId, LpSummary, Message, MessageKind, Timestamp,
};

pub const HEADER_LEN: usize = 1 + 8 + 4 + 4 + 8 + 4;
pub const CONTROLLER_ADDR: u32 = u32::MAX;

pub const TAG_EVENT: u8 = 0;
pub const TAG_ACK: u8 = 1;
pub const TAG_MARKED_ACK: u8 = 2;
pub const TAG_ANTIMESSAGE: u8 = 3;
pub const TAG_GVT_REQUEST: u8 = 16;
pub const TAG_GVT_REPORT: u8 = 17;
pub const TAG_GVT_BROADCAST: u8 = 18;
pub const TAG_STOP: u8 = 19;
pub const TAG_SUMMARY: u8 = 20;
/// Connection handshake, only seen by the TCP transport.
pub const TAG_HELLO: u8 = 32;
/// Connection-level frame: the sender will write nothing more.
pub const TAG_GOODBYE: u8 = 33;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("frame too short: {0} bytes")]
    Truncated(usize),
    #[error("unknown kind tag {0}")]
    UnknownKind(u8),
    #[error("payload length {declared} does not match remaining {actual} bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid timestamp {0}")]
    BadTimestamp(f64),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("{0:?} message must carry a payload")]
    MissingPayload(MessageKind),
    #[error("unexpected controller address in {0} field")]
    BadAddress(&'static str),
}

/// Model payloads that can cross a process boundary.
pub trait WirePayload: Clone + fmt::Debug + PartialEq + Send + 'static {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(bytes: &[u8]) -> Result<Self, DecodeError>;
}

impl WirePayload for u64 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let raw: [u8; 8] = bytes
            .try_into()
            .map_err(|_| DecodeError::Payload(format!("expected 8 bytes, got {}", bytes.len())))?;
        Ok(u64::from_le_bytes(raw))
    }
}

impl WirePayload for u32 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let raw: [u8; 4] = bytes
            .try_into()
            .map_err(|_| DecodeError::Payload(format!("expected 4 bytes, got {}", bytes.len())))?;
        Ok(u32::from_le_bytes(raw))
    }
}

/// The fixed header, decoded but not yet interpreted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub kind: u8,
    pub seq: u64,
    pub sender: u32,
    pub receiver: u32,
    pub timestamp: f64,
}

pub fn write_header(out: &mut Vec<u8>, header: Header, payload_len: u32) {
    out.push(header.kind);
    out.extend_from_slice(&header.seq.to_le_bytes());
    out.extend_from_slice(&header.sender.to_le_bytes());
    out.extend_from_slice(&header.receiver.to_le_bytes());
    out.extend_from_slice(&header.timestamp.to_le_bytes());
    out.extend_from_slice(&payload_len.to_le_bytes());
}

/// Splits a frame into its header and payload bytes.
pub fn split_frame(bytes: &[u8]) -> Result<(Header, &[u8]), DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated(bytes.len()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let header = Header {
        kind: bytes[0],
        seq: u64_at(1),
        sender: u32_at(9),
        receiver: u32_at(13),
        timestamp: f64::from_bits(u64_at(17)),
    };
    let declared = u32_at(25) as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != declared {
        return Err(DecodeError::LengthMismatch {
            declared,
            actual: payload.len(),
        });
    }
    Ok((header, payload))
}

fn kind_tag(kind: MessageKind) -> u8 {
    match kind {
        MessageKind::Event => TAG_EVENT,
        MessageKind::Ack => TAG_ACK,
        MessageKind::MarkedAck => TAG_MARKED_ACK,
        MessageKind::Antimessage => TAG_ANTIMESSAGE,
    }
}

fn address_word(addr: Address) -> u32 {
    match addr {
        Address::Lp(lp) => lp.0,
        Address::Controller => CONTROLLER_ADDR,
    }
}

/// Appends the canonical encoding of `env` to `out`.
pub fn encode<P: WirePayload>(env: &Envelope<P>, out: &mut Vec<u8>) {
    let start = out.len();
    let mut payload = Vec::new();
    let header = match env {
        Envelope::Sim(m) => {
            if let Some(p) = &m.payload {
                p.encode(&mut payload);
            }
            Header {
                kind: kind_tag(m.kind),
                seq: m.seq_number,
                sender: m.lp_sender.0,
                receiver: m.lp_receiver.0,
                timestamp: m.timestamp.value(),
            }
        }
        Envelope::Control(c) => {
            let ctrl = address_word(Address::Controller);
            match *c {
                Control::GvtRequest { lp, round } => Header {
                    kind: TAG_GVT_REQUEST,
                    seq: round,
                    sender: ctrl,
                    receiver: lp.0,
                    timestamp: 0.0,
                },
                Control::GvtReport {
                    lp,
                    round,
                    local_min,
                } => Header {
                    kind: TAG_GVT_REPORT,
                    seq: round,
                    sender: lp.0,
                    receiver: ctrl,
                    timestamp: local_min.value(),
                },
                Control::GvtBroadcast { lp, round, gvt } => Header {
                    kind: TAG_GVT_BROADCAST,
                    seq: round,
                    sender: ctrl,
                    receiver: lp.0,
                    timestamp: gvt.value(),
                },
                Control::Stop { lp, round, gvt } => Header {
                    kind: TAG_STOP,
                    seq: round,
                    sender: ctrl,
                    receiver: lp.0,
                    timestamp: gvt.value(),
                },
                Control::Summary { lp, summary } => {
                    for v in [
                        summary.rollbacks,
                        summary.events_processed,
                        summary.events_committed,
                        summary.peak_history,
                        summary.remote_sends,
                    ] {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                    Header {
                        kind: TAG_SUMMARY,
                        seq: 0,
                        sender: lp.0,
                        receiver: ctrl,
                        timestamp: 0.0,
                    }
                }
            }
        }
    };
    write_header(out, header, payload.len() as u32);
    out.extend_from_slice(&payload);
    debug_assert_eq!(out.len() - start, HEADER_LEN + payload.len());
}

pub fn encode_to_vec<P: WirePayload>(env: &Envelope<P>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 16);
    encode(env, &mut out);
    out
}

fn lp_field(word: u32, field: &'static str) -> Result<LpId, DecodeError> {
    if word == CONTROLLER_ADDR {
        Err(DecodeError::BadAddress(field))
    } else {
        Ok(LpId(word))
    }
}

/// Decodes one complete frame (without the TCP length prefix).
pub fn decode<P: WirePayload>(bytes: &[u8]) -> Result<Envelope<P>, DecodeError> {
    let (h, payload) = split_frame(bytes)?;
    let timestamp =
        Timestamp::new(h.timestamp).map_err(|_| DecodeError::BadTimestamp(h.timestamp))?;
    let sim = |kind: MessageKind| -> Result<Envelope<P>, DecodeError> {
        let payload = match kind {
            MessageKind::Event | MessageKind::Antimessage => {
                if payload.is_empty() {
                    return Err(DecodeError::MissingPayload(kind));
                }
                Some(P::decode(payload)?)
            }
            MessageKind::Ack | MessageKind::MarkedAck => None,
        };
        Ok(Envelope::Sim(Message {
            kind,
            seq_number: h.seq,
            lp_sender: lp_field(h.sender, "sender")?,
            lp_receiver: lp_field(h.receiver, "receiver")?,
            payload,
            timestamp,
        }))
    };
    let control = |c: Control| Ok(Envelope::Control(c));
    match h.kind {
        TAG_EVENT => sim(MessageKind::Event),
        TAG_ACK => sim(MessageKind::Ack),
        TAG_MARKED_ACK => sim(MessageKind::MarkedAck),
        TAG_ANTIMESSAGE => sim(MessageKind::Antimessage),
        TAG_GVT_REQUEST => control(Control::GvtRequest {
            lp: lp_field(h.receiver, "receiver")?,
            round: h.seq,
        }),
        TAG_GVT_REPORT => control(Control::GvtReport {
            lp: lp_field(h.sender, "sender")?,
            round: h.seq,
            local_min: timestamp,
        }),
        TAG_GVT_BROADCAST => control(Control::GvtBroadcast {
            lp: lp_field(h.receiver, "receiver")?,
            round: h.seq,
            gvt: timestamp,
        }),
        TAG_STOP => control(Control::Stop {
            lp: lp_field(h.receiver, "receiver")?,
            round: h.seq,
            gvt: timestamp,
        }),
        TAG_SUMMARY => {
            if payload.len() != 40 {
                return Err(DecodeError::Payload(format!(
                    "summary needs 40 bytes, got {}",
                    payload.len()
                )));
            }
            let word = |i: usize| u64::from_le_bytes(payload[i * 8..i * 8 + 8].try_into().unwrap());
            control(Control::Summary {
                lp: lp_field(h.sender, "sender")?,
                summary: LpSummary {
                    rollbacks: word(0),
                    events_processed: word(1),
                    events_committed: word(2),
                    peak_history: word(3),
                    remote_sends: word(4),
                },
            })
        }
        other => Err(DecodeError::UnknownKind(other)),
    }
}
