//! Byte-exact frame codec for the logit-serving protocol.
//!
//! ```text
//! header (17 bytes, little-endian):
//!   0..4    magic "DKD1"
//!   4       msg_type  1 logit_request | 2 logit_response | 3 error
//!                     4 model_info_request | 5 model_info_response
//!   5..13   request_id u64
//!   13..17  payload_len u32
//!
//! logit_request:       role u8 | batch u16 | seq_len u16 | batch*seq_len × u32 token ids
//! logit_response:      batch u16 | seq_len u16 | vocab u32 | batch*seq_len*vocab × binary16
//! error:               UTF-8 message
//! model_info_request:  (empty)
//! model_info_response: vocab u32 | context_limit u32 | max_batch u16 | role_mask u8
//! ```
//!
//! The request id of a response or error frame echoes the request it
//! answers; it is carried only in the header.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::fp16::is_finite_f16;

pub const MAGIC: [u8; 4] = *b"DKD1";
pub const HEADER_LEN: usize = 17;
/// Upper bound on a payload; larger declared lengths are rejected before
/// any payload byte is read.
pub const MAX_PAYLOAD: u32 = 256 << 20;

pub const ROLE_TEACHER_RAW: u8 = 1;
pub const ROLE_TEACHER_FT: u8 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    /// Not enough bytes for the declared frame. Nothing was consumed.
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("length mismatch: payload has {payload} bytes, {expected} expected")]
    LengthMismatch { payload: usize, expected: usize },
    #[error("payload length {0} exceeds the {MAX_PAYLOAD} byte limit")]
    PayloadTooLarge(u32),
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    LogitRequest = 1,
    LogitResponse = 2,
    Error = 3,
    ModelInfoRequest = 4,
    ModelInfoResponse = 5,
}

impl TryFrom<u8> for MsgType {
    type Error = ProtocolError;

    fn try_from(b: u8) -> Result<Self, ProtocolError> {
        Ok(match b {
            1 => MsgType::LogitRequest,
            2 => MsgType::LogitResponse,
            3 => MsgType::Error,
            4 => MsgType::ModelInfoRequest,
            5 => MsgType::ModelInfoResponse,
            other => return Err(ProtocolError::UnknownMsgType(other)),
        })
    }
}

/// Rectangular batch of token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogitRequest {
    /// Raw role byte; the server decides whether it is served.
    pub role: u8,
    pub batch: u16,
    pub seq_len: u16,
    pub tokens: Vec<u32>,
}

/// Logits for every position of every sequence, as binary16 bit patterns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogitResponse {
    pub batch: u16,
    pub seq_len: u16,
    pub vocab: u32,
    pub logits: Vec<u16>,
}

impl LogitResponse {
    /// Logit row for sequence `b`, position `t`, decoded to `f64`.
    pub fn row(&self, b: usize, t: usize) -> Vec<f64> {
        let v = self.vocab as usize;
        let start = (b * self.seq_len as usize + t) * v;
        self.logits[start..start + v]
            .iter()
            .map(|&h| super::fp16::f16_bits_to_f64(h))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelInfo {
    pub vocab: u32,
    pub context_limit: u32,
    pub max_batch: u16,
    /// bit 0: teacher_raw served, bit 1: teacher_ft served.
    pub role_mask: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    LogitRequest(LogitRequest),
    LogitResponse(LogitResponse),
    Error(String),
    ModelInfoRequest,
    ModelInfoResponse(ModelInfo),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::LogitRequest(_) => MsgType::LogitRequest,
            Message::LogitResponse(_) => MsgType::LogitResponse,
            Message::Error(_) => MsgType::Error,
            Message::ModelInfoRequest => MsgType::ModelInfoRequest,
            Message::ModelInfoResponse(_) => MsgType::ModelInfoResponse,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub request_id: u64,
    pub message: Message,
}

impl Frame {
    pub fn new(request_id: u64, message: Message) -> Self {
        Self { request_id, message }
    }
}

fn invalid(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::InvalidPayload(msg.into())
}

fn encode_payload(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let mut out = Vec::new();
    match msg {
        Message::LogitRequest(r) => {
            let n = r.batch as usize * r.seq_len as usize;
            if n == 0 {
                return Err(invalid("logit request with an empty batch"));
            }
            if r.tokens.len() != n {
                return Err(invalid(format!(
                    "logit request carries {} ids for a {}x{} batch",
                    r.tokens.len(),
                    r.batch,
                    r.seq_len
                )));
            }
            out.reserve(5 + 4 * n);
            out.push(r.role);
            out.extend_from_slice(&r.batch.to_le_bytes());
            out.extend_from_slice(&r.seq_len.to_le_bytes());
            for t in &r.tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        Message::LogitResponse(r) => {
            let n = r.batch as usize * r.seq_len as usize * r.vocab as usize;
            if r.logits.len() != n {
                return Err(invalid(format!(
                    "logit response carries {} values for {}x{}x{}",
                    r.logits.len(),
                    r.batch,
                    r.seq_len,
                    r.vocab
                )));
            }
            if r.logits.iter().any(|&h| !is_finite_f16(h)) {
                return Err(invalid("non-finite logit"));
            }
            out.reserve(8 + 2 * n);
            out.extend_from_slice(&r.batch.to_le_bytes());
            out.extend_from_slice(&r.seq_len.to_le_bytes());
            out.extend_from_slice(&r.vocab.to_le_bytes());
            for h in &r.logits {
                out.extend_from_slice(&h.to_le_bytes());
            }
        }
        Message::Error(text) => out.extend_from_slice(text.as_bytes()),
        Message::ModelInfoRequest => {}
        Message::ModelInfoResponse(i) => {
            out.extend_from_slice(&i.vocab.to_le_bytes());
            out.extend_from_slice(&i.context_limit.to_le_bytes());
            out.extend_from_slice(&i.max_batch.to_le_bytes());
            out.push(i.role_mask);
        }
    }
    if out.len() > MAX_PAYLOAD as usize {
        return Err(ProtocolError::PayloadTooLarge(out.len() as u32));
    }
    Ok(out)
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, ProtocolError> {
    let payload = encode_payload(&frame.message)?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(frame.message.msg_type() as u8);
    out.extend_from_slice(&frame.request_id.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Header {
    msg_type: MsgType,
    request_id: u64,
    payload_len: u32,
}

fn parse_header(bytes: &[u8; HEADER_LEN]) -> Result<Header, ProtocolError> {
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let msg_type = MsgType::try_from(bytes[4])?;
    let request_id = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let payload_len = u32::from_le_bytes(bytes[13..17].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(ProtocolError::PayloadTooLarge(payload_len));
    }
    Ok(Header {
        msg_type,
        request_id,
        payload_len,
    })
}

fn expect_len(p: &[u8], want: usize) -> Result<(), ProtocolError> {
    if p.len() == want {
        Ok(())
    } else {
        Err(ProtocolError::LengthMismatch {
            payload: p.len(),
            expected: want,
        })
    }
}

fn u16_at(p: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([p[i], p[i + 1]])
}

fn u32_at(p: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(p[i..i + 4].try_into().unwrap())
}

fn decode_payload(msg_type: MsgType, p: &[u8]) -> Result<Message, ProtocolError> {
    match msg_type {
        MsgType::LogitRequest => {
            if p.len() < 5 {
                return Err(invalid("logit request shorter than its 5-byte prefix"));
            }
            let role = p[0];
            let batch = u16_at(p, 1);
            let seq_len = u16_at(p, 3);
            let n = batch as usize * seq_len as usize;
            if n == 0 {
                return Err(invalid("logit request with an empty batch"));
            }
            expect_len(p, 5 + 4 * n)?;
            let tokens = (0..n).map(|i| u32_at(p, 5 + 4 * i)).collect();
            Ok(Message::LogitRequest(LogitRequest {
                role,
                batch,
                seq_len,
                tokens,
            }))
        }
        MsgType::LogitResponse => {
            if p.len() < 8 {
                return Err(invalid("logit response shorter than its 8-byte prefix"));
            }
            let batch = u16_at(p, 0);
            let seq_len = u16_at(p, 2);
            let vocab = u32_at(p, 4);
            let n = (batch as usize)
                .checked_mul(seq_len as usize)
                .and_then(|x| x.checked_mul(vocab as usize))
                .and_then(|x| x.checked_mul(2))
                .and_then(|x| x.checked_add(8))
                .ok_or_else(|| invalid("logit response dimensions overflow"))?;
            expect_len(p, n)?;
            let logits: Vec<u16> = p[8..].chunks_exact(2).map(|c| u16_at(c, 0)).collect();
            if logits.iter().any(|&h| !is_finite_f16(h)) {
                return Err(invalid("non-finite logit"));
            }
            Ok(Message::LogitResponse(LogitResponse {
                batch,
                seq_len,
                vocab,
                logits,
            }))
        }
        MsgType::Error => {
            let text = std::str::from_utf8(p).map_err(|_| invalid("error text is not UTF-8"))?;
            Ok(Message::Error(text.to_owned()))
        }
        MsgType::ModelInfoRequest => {
            expect_len(p, 0)?;
            Ok(Message::ModelInfoRequest)
        }
        MsgType::ModelInfoResponse => {
            expect_len(p, 11)?;
            Ok(Message::ModelInfoResponse(ModelInfo {
                vocab: u32_at(p, 0),
                context_limit: u32_at(p, 4),
                max_batch: u16_at(p, 8),
                role_mask: p[10],
            }))
        }
    }
}

/// Decodes one frame from the front of `buf`, returning it with the number
/// of bytes consumed. On [`ProtocolError::Truncated`] nothing is consumed
/// and the caller may retry once more bytes arrive.
pub fn try_decode(buf: &[u8]) -> Result<(Frame, usize), ProtocolError> {
    if buf.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated {
            needed: HEADER_LEN,
            available: buf.len(),
        });
    }
    let header = parse_header(buf[..HEADER_LEN].try_into().unwrap())?;
    let total = HEADER_LEN + header.payload_len as usize;
    if buf.len() < total {
        return Err(ProtocolError::Truncated {
            needed: total,
            available: buf.len(),
        });
    }
    let message = decode_payload(header.msg_type, &buf[HEADER_LEN..total])?;
    Ok((Frame::new(header.request_id, message), total))
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_frame(buf: &[u8]) -> Result<Frame, ProtocolError> {
    let (frame, used) = try_decode(buf)?;
    if used != buf.len() {
        return Err(ProtocolError::LengthMismatch {
            payload: buf.len() - HEADER_LEN,
            expected: used - HEADER_LEN,
        });
    }
    Ok(frame)
}

/// Error from reading a frame off a stream.
#[derive(Debug, Error)]
pub enum ReadError {
    #[error(transparent)]
    Io(#[from] io::Error),
    /// The header was valid but the payload was not; the stream is still
    /// positioned at the next frame.
    #[error("request {request_id}: {error}")]
    Payload {
        request_id: u64,
        error: ProtocolError,
    },
    /// The header itself was malformed; the stream is unusable.
    #[error(transparent)]
    Header(ProtocolError),
}

/// Reads exactly one frame. Never reads past the declared payload.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let h = parse_header(&header).map_err(ReadError::Header)?;
    let mut payload = vec![0u8; h.payload_len as usize];
    r.read_exact(&mut payload)?;
    let message = decode_payload(h.msg_type, &payload).map_err(|error| ReadError::Payload {
        request_id: h.request_id,
        error,
    })?;
    Ok(Frame::new(h.request_id, message))
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let bytes = encode_frame(frame).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
    w.write_all(&bytes)?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn request() -> Frame {
        Frame::new(
            7,
            Message::LogitRequest(LogitRequest {
                role: ROLE_TEACHER_FT,
                batch: 2,
                seq_len: 2,
                tokens: vec![1, 5, 9, 300],
            }),
        )
    }

    #[test]
    fn header_layout() {
        let bytes = encode_frame(&request()).unwrap();
        assert_eq!(&bytes[0..4], b"DKD1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..13], &7u64.to_le_bytes());
        assert_eq!(&bytes[13..17], &21u32.to_le_bytes());
        assert_eq!(bytes.len(), HEADER_LEN + 21);
        assert_eq!(decode_frame(&bytes).unwrap(), request());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_frame(&request()).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_frame(&bytes), Err(ProtocolError::BadMagic(*b"XXXX")));
    }

    #[test]
    fn unknown_type() {
        let mut bytes = encode_frame(&request()).unwrap();
        bytes[4] = 9;
        assert_eq!(decode_frame(&bytes), Err(ProtocolError::UnknownMsgType(9)));
    }

    #[test]
    fn truncated_payload_consumes_nothing() {
        let bytes = encode_frame(&request()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert_eq!(
            try_decode(cut),
            Err(ProtocolError::Truncated { needed: bytes.len(), available: bytes.len() - 3 })
        );
        // two frames back to back decode in sequence
        let mut two = bytes.clone();
        two.extend_from_slice(&bytes);
        let (_, used) = try_decode(&two).unwrap();
        assert_eq!(try_decode(&two[used..]).unwrap().1, bytes.len());
        // trailing garbage after a single frame is a length mismatch
        assert!(matches!(decode_frame(&two), Err(ProtocolError::LengthMismatch { .. })));
    }

    #[test]
    fn declared_length_inconsistent_with_dims() {
        let mut bytes = encode_frame(&request()).unwrap();
        // claim batch 3 with the same payload size
        bytes[HEADER_LEN + 1] = 3;
        assert!(matches!(decode_frame(&bytes), Err(ProtocolError::LengthMismatch { .. })));
    }

    #[test]
    fn oversize_header_rejected_without_reading() {
        let mut bytes = encode_frame(&request()).unwrap();
        bytes[13..17].copy_from_slice(&u32::MAX.to_le_bytes());
        assert_eq!(try_decode(&bytes), Err(ProtocolError::PayloadTooLarge(u32::MAX)));
    }

    #[test]
    fn stream_reader_recovers_after_bad_payload() {
        let bad = Frame::new(3, Message::Error(String::new()));
        let mut bytes = encode_frame(&bad).unwrap();
        // replace with invalid utf-8 of the same length
        bytes[13..17].copy_from_slice(&1u32.to_le_bytes());
        bytes.push(0xFF);
        bytes.extend(encode_frame(&request()).unwrap());
        let mut cursor = std::io::Cursor::new(bytes);
        assert!(matches!(read_frame(&mut cursor), Err(ReadError::Payload { request_id: 3, .. })));
        assert_eq!(read_frame(&mut cursor).unwrap(), request());
    }

    #[test]
    fn encode_validates() {
        let f = Frame::new(1, Message::LogitRequest(LogitRequest { role: 1, batch: 0, seq_len: 4, tokens: vec![] }));
        assert!(encode_frame(&f).is_err());
        let f = Frame::new(1, Message::LogitResponse(LogitResponse { batch: 1, seq_len: 1, vocab: 2, logits: vec![0x3C00, 0x7C00] }));
        assert!(encode_frame(&f).is_err());
    }

    fn message_strategy() -> impl Strategy<Value = Message> {
        prop_oneof![
            (any::<u8>(), 1u16..5, 1u16..6).prop_flat_map(|(role, b, s)| {
                prop::collection::vec(any::<u32>(), (b * s) as usize)
                    .prop_map(move |tokens| Message::LogitRequest(LogitRequest { role, batch: b, seq_len: s, tokens }))
            }),
            (0u16..3, 0u16..4, 0u32..5).prop_flat_map(|(b, s, v)| {
                prop::collection::vec(0u16..0x7C00, (b as usize) * (s as usize) * (v as usize))
                    .prop_map(move |logits| Message::LogitResponse(LogitResponse { batch: b, seq_len: s, vocab: v, logits }))
            }),
            ".*".prop_map(Message::Error),
            Just(Message::ModelInfoRequest),
            (any::<u32>(), any::<u32>(), any::<u16>(), any::<u8>()).prop_map(|(vocab, context_limit, max_batch, role_mask)| {
                Message::ModelInfoResponse(ModelInfo { vocab, context_limit, max_batch, role_mask })
            }),
        ]
    }

    proptest! {
        #[test]
        fn round_trip(id in any::<u64>(), msg in message_strategy()) {
            let f = Frame::new(id, msg);
            let bytes = encode_frame(&f).unwrap();
            prop_assert_eq!(decode_frame(&bytes).unwrap(), f);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_frame(&bytes);
            let mut with_magic = b"DKD1".to_vec();
            with_magic.extend_from_slice(&bytes);
            let _ = decode_frame(&with_magic);
        }
    }
}
