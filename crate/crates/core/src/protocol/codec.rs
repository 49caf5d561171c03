//! Frame layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       2     magic "TR"
//! 2       1     protocol version
//! 3       1     message type
//! 4       4     payload length (u32)
//! 8       n     payload
//! 8+n     4     CRC-32 (IEEE) of the payload
//! ```
//!
//! Payloads per message type:
//!
//! | type | message     | payload                                              |
//! |------|-------------|------------------------------------------------------|
//! | 1    | Hello       | client_id u64, role u8, protocol_version u8          |
//! | 2    | WeightsDown | round_id u64, weights                                |
//! | 3    | WeightsUp   | round_id u64, weights, local_loss f64                |
//! | 4    | EvalRequest | round_id u64, k u32, weights                         |
//! | 5    | EvalReport  | round_id u64, query_loss f64, has_acc u8, [acc f64]  |
//! | 6    | Abort       | round_id u64, reason u8                              |
//! | 7    | Bye         | (empty)                                              |
//!
//! `weights` is a u32 element count followed by that many f32 values, the
//! same encoding as [`ModelWeights::to_le_bytes`](crate::nn::ModelWeights::to_le_bytes).

use thiserror::Error;

use crate::meta::{ClientId, Role};
use crate::nn::{read_le_f32s, write_le_f32s};

pub const MAGIC: [u8; 2] = *b"TR";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
pub const CHECKSUM_LEN: usize = 4;
/// Upper bound on a payload accepted from a stream.
pub const MAX_PAYLOAD: usize = 64 << 20;

/// Why a round or session was abandoned. Carried in [`Message::Abort`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AbortReason {
    Timeout,
    Disconnect,
    ProtocolViolation,
    Malformed,
    VersionMismatch,
    Busy,
    ClientError,
    Unknown(u8),
}

impl AbortReason {
    pub fn code(self) -> u8 {
        match self {
            AbortReason::Timeout => 1,
            AbortReason::Disconnect => 2,
            AbortReason::ProtocolViolation => 3,
            AbortReason::Malformed => 4,
            AbortReason::VersionMismatch => 5,
            AbortReason::Busy => 6,
            AbortReason::ClientError => 7,
            AbortReason::Unknown(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            1 => AbortReason::Timeout,
            2 => AbortReason::Disconnect,
            3 => AbortReason::ProtocolViolation,
            4 => AbortReason::Malformed,
            5 => AbortReason::VersionMismatch,
            6 => AbortReason::Busy,
            7 => AbortReason::ClientError,
            c => AbortReason::Unknown(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        client_id: ClientId,
        role: Role,
        protocol_version: u8,
    },
    WeightsDown {
        round_id: u64,
        weights: Vec<f32>,
    },
    WeightsUp {
        round_id: u64,
        weights: Vec<f32>,
        local_loss: f64,
    },
    EvalRequest {
        round_id: u64,
        k: u32,
        weights: Vec<f32>,
    },
    EvalReport {
        round_id: u64,
        query_loss: f64,
        query_accuracy: Option<f64>,
    },
    Abort {
        round_id: u64,
        reason: AbortReason,
    },
    Bye,
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Hello { .. } => 1,
            Message::WeightsDown { .. } => 2,
            Message::WeightsUp { .. } => 3,
            Message::EvalRequest { .. } => 4,
            Message::EvalReport { .. } => 5,
            Message::Abort { .. } => 6,
            Message::Bye => 7,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "Hello",
            Message::WeightsDown { .. } => "WeightsDown",
            Message::WeightsUp { .. } => "WeightsUp",
            Message::EvalRequest { .. } => "EvalRequest",
            Message::EvalReport { .. } => "EvalReport",
            Message::Abort { .. } => "Abort",
            Message::Bye => "Bye",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MalformedReason {
    BadMagic,
    BadChecksum,
    UnknownType(u8),
    Truncated,
    TrailingBytes,
    TooLarge,
    BadPayload(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("malformed frame: {reason:?}")]
    MalformedFrame { reason: MalformedReason },
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u8, got: u8 },
}

fn malformed(reason: MalformedReason) -> CodecError {
    CodecError::MalformedFrame { reason }
}

/// Total frame length for a payload of `payload_len` bytes.
pub const fn frame_len(payload_len: usize) -> usize {
    HEADER_LEN + payload_len + CHECKSUM_LEN
}

/// Byte length of a count-prefixed weight vector with `params` entries.
pub const fn weights_len(params: usize) -> usize {
    4 + 4 * params
}

pub fn encode(m: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    match m {
        Message::Hello {
            client_id,
            role,
            protocol_version,
        } => {
            payload.extend_from_slice(&client_id.to_le_bytes());
            payload.push(match role {
                Role::Training => 0,
                Role::Testing => 1,
            });
            payload.push(*protocol_version);
        }
        Message::WeightsDown { round_id, weights } => {
            payload.extend_from_slice(&round_id.to_le_bytes());
            write_le_f32s(weights, &mut payload);
        }
        Message::WeightsUp {
            round_id,
            weights,
            local_loss,
        } => {
            payload.extend_from_slice(&round_id.to_le_bytes());
            write_le_f32s(weights, &mut payload);
            payload.extend_from_slice(&local_loss.to_le_bytes());
        }
        Message::EvalRequest {
            round_id,
            k,
            weights,
        } => {
            payload.extend_from_slice(&round_id.to_le_bytes());
            payload.extend_from_slice(&k.to_le_bytes());
            write_le_f32s(weights, &mut payload);
        }
        Message::EvalReport {
            round_id,
            query_loss,
            query_accuracy,
        } => {
            payload.extend_from_slice(&round_id.to_le_bytes());
            payload.extend_from_slice(&query_loss.to_le_bytes());
            match query_accuracy {
                Some(a) => {
                    payload.push(1);
                    payload.extend_from_slice(&a.to_le_bytes());
                }
                None => payload.push(0),
            }
        }
        Message::Abort { round_id, reason } => {
            payload.extend_from_slice(&round_id.to_le_bytes());
            payload.push(reason.code());
        }
        Message::Bye => {}
    }
    let mut frame = Vec::with_capacity(frame_len(payload.len()));
    frame.extend_from_slice(&MAGIC);
    frame.push(PROTOCOL_VERSION);
    frame.push(m.type_code());
    frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    frame.extend_from_slice(&payload);
    frame.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    frame
}

/// Frame header fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: u8,
    pub payload_len: usize,
}

/// Validates magic and version and extracts type and length.
pub fn parse_header(bytes: &[u8; HEADER_LEN]) -> Result<Header, CodecError> {
    if bytes[..2] != MAGIC {
        return Err(malformed(MalformedReason::BadMagic));
    }
    if bytes[2] != PROTOCOL_VERSION {
        return Err(CodecError::VersionMismatch {
            expected: PROTOCOL_VERSION,
            got: bytes[2],
        });
    }
    Ok(Header {
        msg_type: bytes[3],
        payload_len: u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize,
    })
}

/// Decodes exactly one complete frame.
pub fn decode(bytes: &[u8]) -> Result<Message, CodecError> {
    let (m, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(malformed(MalformedReason::TrailingBytes));
    }
    Ok(m)
}

/// Decodes the frame at the start of `bytes`, returning it and its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Message, usize), CodecError> {
    let Some(head) = bytes.get(..HEADER_LEN) else {
        return Err(malformed(MalformedReason::Truncated));
    };
    let header = parse_header(head.try_into().unwrap())?;
    let end = HEADER_LEN
        .checked_add(header.payload_len)
        .and_then(|n| n.checked_add(CHECKSUM_LEN))
        .ok_or(malformed(MalformedReason::TooLarge))?;
    let Some(frame) = bytes.get(..end) else {
        return Err(malformed(MalformedReason::Truncated));
    };
    let payload = &frame[HEADER_LEN..end - CHECKSUM_LEN];
    let crc = u32::from_le_bytes(frame[end - CHECKSUM_LEN..].try_into().unwrap());
    Ok((decode_payload(header.msg_type, payload, crc)?, end))
}

/// Checks the payload against its checksum and parses it.
pub fn decode_payload(msg_type: u8, payload: &[u8], crc: u32) -> Result<Message, CodecError> {
    if !(1..=7).contains(&msg_type) {
        return Err(malformed(MalformedReason::UnknownType(msg_type)));
    }
    if crc32fast::hash(payload) != crc {
        return Err(malformed(MalformedReason::BadChecksum));
    }
    let mut r = Reader { buf: payload };
    let m = match msg_type {
        1 => {
            let client_id = r.u64()?;
            let role = match r.u8()? {
                0 => Role::Training,
                1 => Role::Testing,
                _ => return Err(malformed(MalformedReason::BadPayload("role"))),
            };
            Message::Hello {
                client_id,
                role,
                protocol_version: r.u8()?,
            }
        }
        2 => Message::WeightsDown {
            round_id: r.u64()?,
            weights: r.weights()?,
        },
        3 => Message::WeightsUp {
            round_id: r.u64()?,
            weights: r.weights()?,
            local_loss: r.f64()?,
        },
        4 => Message::EvalRequest {
            round_id: r.u64()?,
            k: r.u32()?,
            weights: r.weights()?,
        },
        5 => {
            let round_id = r.u64()?;
            let query_loss = r.f64()?;
            let query_accuracy = match r.u8()? {
                0 => None,
                1 => Some(r.f64()?),
                _ => return Err(malformed(MalformedReason::BadPayload("accuracy flag"))),
            };
            Message::EvalReport {
                round_id,
                query_loss,
                query_accuracy,
            }
        }
        6 => Message::Abort {
            round_id: r.u64()?,
            reason: AbortReason::from_code(r.u8()?),
        },
        7 => Message::Bye,
        _ => unreachable!(),
    };
    if !r.buf.is_empty() {
        return Err(malformed(MalformedReason::BadPayload("trailing payload bytes")));
    }
    Ok(m)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        let Some(head) = self.buf.get(..N) else {
            return Err(malformed(MalformedReason::BadPayload("payload too short")));
        };
        let out = head.try_into().unwrap();
        self.buf = &self.buf[N..];
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn weights(&mut self) -> Result<Vec<f32>, CodecError> {
        let (values, used) =
            read_le_f32s(self.buf).map_err(|_| malformed(MalformedReason::BadPayload("weights")))?;
        self.buf = &self.buf[used..];
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_down_for_sine_model() {
        let weights: Vec<f32> = (0..1153).map(|i| i as f32 * 0.001).collect();
        let m = Message::WeightsDown {
            round_id: 42,
            weights,
        };
        let frame = encode(&m);
        let header = parse_header(frame[..8].try_into().unwrap()).unwrap();
        assert_eq!(weights_len(1153), 4 + 1153 * 4);
        assert_eq!(header.payload_len, 8 + weights_len(1153));
        assert_eq!(frame.len(), frame_len(8 + 4 + 1153 * 4));
        assert_eq!(decode(&frame).unwrap(), m);
    }

    #[test]
    fn bye_frame_layout() {
        let frame = encode(&Message::Bye);
        assert_eq!(frame.len(), HEADER_LEN + CHECKSUM_LEN);
        assert_eq!(frame.len(), 12);
        assert_eq!(&frame[..8], &[b'T', b'R', 1, 7, 0, 0, 0, 0]);
        // CRC-32 of the empty string is zero.
        assert_eq!(&frame[8..], &[0, 0, 0, 0]);
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut frame = encode(&Message::WeightsUp {
            round_id: 1,
            weights: vec![1.0, 2.0],
            local_loss: 0.5,
        });
        frame[12] ^= 0x10;
        assert_eq!(
            decode(&frame),
            Err(malformed(MalformedReason::BadChecksum))
        );
    }

    #[test]
    fn rejections() {
        let good = encode(&Message::Abort {
            round_id: 3,
            reason: AbortReason::Busy,
        });
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert_eq!(decode(&bad_magic), Err(malformed(MalformedReason::BadMagic)));

        let mut bad_version = good.clone();
        bad_version[2] = 9;
        assert_eq!(
            decode(&bad_version),
            Err(CodecError::VersionMismatch { expected: 1, got: 9 })
        );

        let mut bad_type = good.clone();
        bad_type[3] = 99;
        assert_eq!(
            decode(&bad_type),
            Err(malformed(MalformedReason::UnknownType(99)))
        );

        assert_eq!(
            decode(&good[..good.len() - 1]),
            Err(malformed(MalformedReason::Truncated))
        );
        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long), Err(malformed(MalformedReason::TrailingBytes)));
        assert_eq!(decode(&[]), Err(malformed(MalformedReason::Truncated)));
    }

    #[test]
    fn abort_codes_round_trip() {
        for code in 0..=255u8 {
            assert_eq!(AbortReason::from_code(code).code(), code);
        }
    }
}
