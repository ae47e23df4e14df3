//! Wire format for session messages.
//!
//! Every message is a 21-byte little-endian header followed by the payload:
//!
//! ```text
//! 0   4  magic "M3TR"
//! 4   1  version (1)
//! 5   1  msg_type (0 signal, 1 avatar manifest, 2 param frame, 3 ack)
//! 6   4  frame_index u32
//! 10  8  timestamp_us u64
//! 18  1  flags (bit0: LZ4 block-compressed payload)
//! 19  2  payload_len u16
//! 21  .. payload
//! ```
//!
//! A parameter frame payload is the 430-byte binary16 image of the 215
//! parameters, compressed with one LZ4 block when that is strictly smaller.

use thiserror::Error;

use crate::params::{self, MotionParams, ParamError, PARAM_LEN};

pub const MAGIC: [u8; 4] = *b"M3TR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 21;
pub const RAW_PAYLOAD_LEN: usize = PARAM_LEN * 2;
pub const MAX_PAYLOAD_LEN: usize = 1400;
/// Largest parameter-frame packet: header plus raw payload.
pub const MAX_FRAME_PACKET_LEN: usize = HEADER_LEN + RAW_PAYLOAD_LEN;
pub const FLAG_LZ4: u8 = 0x01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("framing error: need {needed} bytes, have {available}")]
    Framing { needed: usize, available: usize },
    #[error("corrupt payload: {0}")]
    Corruption(String),
    #[error("schema error: decompressed payload is {0} bytes, expected {RAW_PAYLOAD_LEN}")]
    Schema(usize),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgType {
    Signal = 0,
    AvatarManifest = 1,
    ParamFrame = 2,
    Ack = 3,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(MsgType::Signal),
            1 => Some(MsgType::AvatarManifest),
            2 => Some(MsgType::ParamFrame),
            3 => Some(MsgType::Ack),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePacket {
    pub msg_type: MsgType,
    pub frame_index: u32,
    pub timestamp_us: u64,
    pub flags: u8,
    pub payload: Vec<u8>,
}

impl FramePacket {
    pub fn new(msg_type: MsgType, frame_index: u32, timestamp_us: u64, payload: Vec<u8>) -> Result<Self, CodecError> {
        if payload.len() > MAX_PAYLOAD_LEN {
            return Err(CodecError::InvalidArgument(format!(
                "payload of {} bytes exceeds {MAX_PAYLOAD_LEN}",
                payload.len()
            )));
        }
        Ok(Self {
            msg_type,
            frame_index,
            timestamp_us,
            flags: 0,
            payload,
        })
    }

    pub fn is_compressed(&self) -> bool {
        self.flags & FLAG_LZ4 != 0
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.write_to(&mut out);
        out
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        out.extend_from_slice(&self.timestamp_us.to_le_bytes());
        out.push(self.flags);
        out.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Parses one packet from the front of `buf`, returning it with the
    /// number of bytes consumed.
    pub fn parse_prefix(buf: &[u8]) -> Result<(Self, usize), CodecError> {
        if buf.len() < HEADER_LEN {
            return Err(CodecError::Framing {
                needed: HEADER_LEN,
                available: buf.len(),
            });
        }
        if buf[0..4] != MAGIC {
            return Err(CodecError::Protocol(format!("bad magic {:02x?}", &buf[0..4])));
        }
        if buf[4] != VERSION {
            return Err(CodecError::Protocol(format!("unsupported version {}", buf[4])));
        }
        let msg_type = MsgType::from_u8(buf[5]).ok_or_else(|| CodecError::Protocol(format!("unknown message type {}", buf[5])))?;
        let frame_index = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes"));
        let timestamp_us = u64::from_le_bytes(buf[10..18].try_into().expect("8 bytes"));
        let flags = buf[18];
        if flags & !FLAG_LZ4 != 0 {
            return Err(CodecError::Protocol(format!("reserved flag bits set: {flags:#04x}")));
        }
        let len = u16::from_le_bytes([buf[19], buf[20]]) as usize;
        if len > MAX_PAYLOAD_LEN {
            return Err(CodecError::Protocol(format!("payload length {len} exceeds {MAX_PAYLOAD_LEN}")));
        }
        let total = HEADER_LEN + len;
        if buf.len() < total {
            return Err(CodecError::Framing {
                needed: total,
                available: buf.len(),
            });
        }
        Ok((
            Self {
                msg_type,
                frame_index,
                timestamp_us,
                flags,
                payload: buf[HEADER_LEN..total].to_vec(),
            },
            total,
        ))
    }

    /// Parses a buffer holding exactly one packet.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, CodecError> {
        let (p, used) = Self::parse_prefix(buf)?;
        if used != buf.len() {
            return Err(CodecError::Protocol(format!(
                "{} trailing bytes after packet",
                buf.len() - used
            )));
        }
        Ok(p)
    }
}

/// FP16 + LZ4 encoding of one parameter frame.
pub fn encode_frame(p: &MotionParams) -> Result<FramePacket, CodecError> {
    let halves = params::to_half_vec(p.values())?;
    let mut raw = Vec::with_capacity(RAW_PAYLOAD_LEN);
    for h in &halves {
        raw.extend_from_slice(&h.0.to_le_bytes());
    }
    let packed = lz4_flex::block::compress(&raw);
    let (payload, flags) = if packed.len() < raw.len() {
        (packed, FLAG_LZ4)
    } else {
        (raw, 0)
    };
    Ok(FramePacket {
        msg_type: MsgType::ParamFrame,
        frame_index: p.frame_index,
        timestamp_us: p.capture_timestamp_us,
        flags,
        payload,
    })
}

pub fn decode_frame(pkt: &FramePacket) -> Result<MotionParams, CodecError> {
    if pkt.msg_type != MsgType::ParamFrame {
        return Err(CodecError::Protocol(format!("expected a parameter frame, got {:?}", pkt.msg_type)));
    }
    let raw = decode_payload(pkt)?;
    if raw.len() != RAW_PAYLOAD_LEN {
        return Err(CodecError::Schema(raw.len()));
    }
    let mut values = [0.0; PARAM_LEN];
    for (v, b) in values.iter_mut().zip(raw.chunks_exact(2)) {
        *v = params::Half16(u16::from_le_bytes([b[0], b[1]])).to_f64();
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::Corruption("non-finite parameter".into()));
    }
    Ok(MotionParams::from_values(pkt.frame_index, pkt.timestamp_us, values)?)
}

/// Payload bytes with LZ4 undone when flagged.
pub fn decode_payload(pkt: &FramePacket) -> Result<Vec<u8>, CodecError> {
    if !pkt.is_compressed() {
        return Ok(pkt.payload.clone());
    }
    // A block can expand at most ~255x; the bound only has to catch
    // payloads that decode to the wrong size.
    let mut out = vec![0u8; MAX_PAYLOAD_LEN * 255];
    let n = lz4_flex::block::decompress_into(&pkt.payload, &mut out)
        .map_err(|e| CodecError::Corruption(e.to_string()))?;
    out.truncate(n);
    Ok(out)
}

/// Splits a byte stream of concatenated packets back into packets.
#[derive(Debug, Default)]
pub struct StreamParser {
    buf: Vec<u8>,
}

impl StreamParser {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete packet, `None` if more bytes are needed.
    pub fn next_packet(&mut self) -> Result<Option<FramePacket>, CodecError> {
        match FramePacket::parse_prefix(&self.buf) {
            Ok((p, used)) => {
                self.buf.drain(..used);
                Ok(Some(p))
            }
            Err(CodecError::Framing { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Parses a complete byte stream; trailing partial packets are a framing
/// error.
pub fn parse_stream(bytes: &[u8]) -> Result<Vec<FramePacket>, CodecError> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (p, used) = FramePacket::parse_prefix(&bytes[at..])?;
        out.push(p);
        at += used;
    }
    Ok(out)
}

pub const MIN_BITRATE_FRAMES: usize = 300;

/// Mean measured bitrate in Mbps over sample traces sent at `frame_rate`.
/// Each trace contributes `total bytes * 8 / (frames / frame_rate)`.
pub fn steady_state_bitrate(frame_rate: f64, traces: &[Vec<MotionParams>]) -> Result<f64, CodecError> {
    if !(frame_rate > 0.0) || !frame_rate.is_finite() {
        return Err(CodecError::InvalidArgument(format!("frame rate must be positive, got {frame_rate}")));
    }
    if traces.is_empty() {
        return Err(CodecError::InvalidArgument("no traces".into()));
    }
    let mut sum = 0.0;
    for t in traces {
        if t.len() < MIN_BITRATE_FRAMES {
            return Err(CodecError::InvalidArgument(format!(
                "trace has {} frames, at least {MIN_BITRATE_FRAMES} are needed",
                t.len()
            )));
        }
        let mut bytes = 0usize;
        for p in t {
            bytes += encode_frame(p)?.wire_len();
        }
        let duration = t.len() as f64 / frame_rate;
        sum += bytes as f64 * 8.0 / duration / 1e6;
    }
    Ok(sum / traces.len() as f64)
}
