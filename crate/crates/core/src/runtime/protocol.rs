//! Binary framing between clients and server ranks.
//!
//! ```text
//! offset  size  field
//!      0     4  total frame length in bytes, this field included (u32 LE)
//!      4     1  message type: 1 hello, 2 data, 3 goodbye, 4 heartbeat
//!      5     4  client id (u32 LE)
//!      9     4  simulation index (u32 LE)
//!     13     4  time step (u32 LE)
//!     17     4  payload count n (u32 LE)
//!     21    4n  payload, n f32 LE values (data messages only)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const HEADER_BYTES: usize = 21;
/// Frames above this size are rejected before allocation.
pub const MAX_FRAME_BYTES: usize = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    Data = 2,
    Goodbye = 3,
    Heartbeat = 4,
}

impl MessageType {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(MessageType::Hello),
            2 => Some(MessageType::Data),
            3 => Some(MessageType::Goodbye),
            4 => Some(MessageType::Heartbeat),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeStepMessage {
    pub msg_type: MessageType,
    pub client_id: u32,
    pub sim_index: u32,
    pub t: u32,
    pub payload: Vec<f32>,
}

impl TimeStepMessage {
    pub fn control(msg_type: MessageType, client_id: u32, sim_index: u32) -> Self {
        TimeStepMessage {
            msg_type,
            client_id,
            sim_index,
            t: 0,
            payload: Vec::new(),
        }
    }

    pub fn data(client_id: u32, sim_index: u32, t: u32, payload: Vec<f32>) -> Self {
        TimeStepMessage {
            msg_type: MessageType::Data,
            client_id,
            sim_index,
            t,
            payload,
        }
    }

    pub fn frame_len(&self) -> usize {
        HEADER_BYTES + 4 * self.payload.len()
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("truncated frame: need {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("frame declares {declared} bytes but {actual} were supplied")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame length {declared} inconsistent with payload count {count} (offset 17)")]
    PayloadMismatch { declared: usize, count: usize },
    #[error("unknown message type {value} at offset 4")]
    UnknownType { value: u8 },
    #[error(
        "{msg_type:?} message carries {count} payload values; only data messages have a payload"
    )]
    UnexpectedPayload { msg_type: MessageType, count: usize },
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("payload of {0} values does not fit in a frame")]
    PayloadTooLong(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

pub fn encode_message(msg: &TimeStepMessage) -> Result<Vec<u8>, ProtocolError> {
    let len = msg.frame_len();
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::PayloadTooLong(msg.payload.len()));
    }
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&(len as u32).to_le_bytes());
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&msg.client_id.to_le_bytes());
    out.extend_from_slice(&msg.sim_index.to_le_bytes());
    out.extend_from_slice(&msg.t.to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u32).to_le_bytes());
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode_message(bytes: &[u8]) -> Result<TimeStepMessage, ProtocolError> {
    if bytes.len() < HEADER_BYTES {
        return Err(ProtocolError::Truncated {
            offset: bytes.len(),
            needed: HEADER_BYTES - bytes.len(),
            available: bytes.len(),
        });
    }
    let declared = u32_at(bytes, 0) as usize;
    if declared != bytes.len() {
        return Err(ProtocolError::LengthMismatch {
            declared,
            actual: bytes.len(),
        });
    }
    let msg_type =
        MessageType::from_byte(bytes[4]).ok_or(ProtocolError::UnknownType { value: bytes[4] })?;
    let count = u32_at(bytes, 17) as usize;
    if HEADER_BYTES + 4 * count != declared {
        return Err(ProtocolError::PayloadMismatch { declared, count });
    }
    if count > 0 && msg_type != MessageType::Data {
        return Err(ProtocolError::UnexpectedPayload { msg_type, count });
    }
    let payload = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(TimeStepMessage {
        msg_type,
        client_id: u32_at(bytes, 5),
        sim_index: u32_at(bytes, 9),
        t: u32_at(bytes, 13),
        payload,
    })
}

pub fn write_message<W: Write>(out: &mut W, msg: &TimeStepMessage) -> Result<(), ProtocolError> {
    out.write_all(&encode_message(msg)?)?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream between frames.
pub fn read_message<R: Read>(input: &mut R) -> Result<Option<TimeStepMessage>, ProtocolError> {
    let mut len_bytes = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match input.read(&mut len_bytes[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    offset: got,
                    needed: 4 - got,
                    available: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let declared = u32::from_le_bytes(len_bytes) as usize;
    if declared > MAX_FRAME_BYTES {
        return Err(ProtocolError::TooLarge(declared));
    }
    if declared < HEADER_BYTES {
        return Err(ProtocolError::Truncated {
            offset: 4,
            needed: HEADER_BYTES - declared,
            available: declared,
        });
    }
    let mut frame = vec![0u8; declared];
    frame[..4].copy_from_slice(&len_bytes);
    let mut filled = 4;
    while filled < declared {
        match input.read(&mut frame[filled..]) {
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    offset: filled,
                    needed: declared - filled,
                    available: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    decode_message(&frame).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn data_round_trip() {
        let m = TimeStepMessage::data(3, 7, 42, vec![1.0, -2.5, 3.25, 1e-7]);
        let bytes = encode_message(&m).unwrap();
        assert_eq!(bytes.len(), 21 + 16);
        assert_eq!(decode_message(&bytes).unwrap(), m);
    }

    #[test]
    fn heartbeat_is_21_bytes() {
        let m = TimeStepMessage::control(MessageType::Heartbeat, 1, 2);
        let bytes = encode_message(&m).unwrap();
        assert_eq!(bytes.len(), 21);
        assert_eq!(u32_at(&bytes, 0), 21);
    }

    #[test]
    fn declared_length_must_match() {
        let mut bytes = encode_message(&TimeStepMessage::data(0, 0, 0, vec![1.0])).unwrap();
        bytes.push(0);
        assert!(matches!(
            decode_message(&bytes),
            Err(ProtocolError::LengthMismatch {
                declared: 25,
                actual: 26
            })
        ));
        bytes.truncate(10);
        assert!(decode_message(&bytes).is_err());
        assert!(matches!(
            decode_message(&bytes[..5]),
            Err(ProtocolError::Truncated { offset: 5, .. })
        ));
    }

    #[test]
    fn rejects_bad_type_and_stray_payload() {
        let mut bytes =
            encode_message(&TimeStepMessage::control(MessageType::Hello, 0, 0)).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_message(&bytes),
            Err(ProtocolError::UnknownType { value: 9 })
        ));
        let mut bytes = encode_message(&TimeStepMessage::data(0, 0, 0, vec![1.0])).unwrap();
        bytes[4] = MessageType::Goodbye as u8;
        assert!(matches!(
            decode_message(&bytes),
            Err(ProtocolError::UnexpectedPayload { .. })
        ));
        let mut bytes = encode_message(&TimeStepMessage::data(0, 0, 0, vec![1.0])).unwrap();
        bytes[17] = 2;
        assert!(matches!(
            decode_message(&bytes),
            Err(ProtocolError::PayloadMismatch { .. })
        ));
    }

    #[test]
    fn stream_reading() {
        let a = TimeStepMessage::control(MessageType::Hello, 1, 1);
        let b = TimeStepMessage::data(1, 1, 0, vec![0.5; 9]);
        let mut wire = Vec::new();
        write_message(&mut wire, &a).unwrap();
        write_message(&mut wire, &b).unwrap();
        let mut cursor = io::Cursor::new(wire.clone());
        assert_eq!(read_message(&mut cursor).unwrap(), Some(a));
        assert_eq!(read_message(&mut cursor).unwrap(), Some(b));
        assert_eq!(read_message(&mut cursor).unwrap(), None);
        let mut cut = io::Cursor::new(wire[..30].to_vec());
        read_message(&mut cut).unwrap();
        assert!(matches!(
            read_message(&mut cut),
            Err(ProtocolError::Truncated { .. })
        ));
    }

    proptest! {
        #[test]
        fn encode_decode_identity(
            kind in 1u8..=4,
            client in any::<u32>(),
            sim in any::<u32>(),
            t in any::<u32>(),
            payload in proptest::collection::vec(any::<f32>().prop_filter("NaN compares unequal", |v| !v.is_nan()), 0..64),
        ) {
            let msg_type = MessageType::from_byte(kind).unwrap();
            let payload = if msg_type == MessageType::Data { payload } else { Vec::new() };
            let m = TimeStepMessage { msg_type, client_id: client, sim_index: sim, t, payload };
            let bytes = encode_message(&m).unwrap();
            prop_assert_eq!(bytes.len(), m.frame_len());
            prop_assert_eq!(decode_message(&bytes).unwrap(), m);
        }
    }
}
