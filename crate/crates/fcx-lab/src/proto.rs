//! Wire protocol for the data-worker pool.
//!
//! Framing: `u32` big-endian payload length, one `u8` message type, then the
//! payload (at most 64 MiB). Control payloads are UTF-8 JSON; SAMPLE payloads
//! carry a JSON header (own `u32` big-endian length prefix) followed by raw
//! little-endian `f32` field values, input frame first, then targets in time
//! order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    HelloAck = 0x02,
    SampleReq = 0x03,
    Sample = 0x04,
    Err = 0x05,
    Ping = 0x06,
    Done = 0x07,
}

impl TryFrom<u8> for MsgType {
    type Error = LabError;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => MsgType::Hello,
            0x02 => MsgType::HelloAck,
            0x03 => MsgType::SampleReq,
            0x04 => MsgType::Sample,
            0x05 => MsgType::Err,
            0x06 => MsgType::Ping,
            0x07 => MsgType::Done,
            other => return Err(LabError::Protocol(format!("unknown message type 0x{:02x}", other))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

pub fn encode_frame(msg_type: MsgType, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() > MAX_PAYLOAD {
        return Err(LabError::Protocol(format!(
            "payload of {} bytes exceeds the {} byte cap",
            payload.len(),
            MAX_PAYLOAD
        )));
    }
    let mut out = Vec::with_capacity(5 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(msg_type as u8);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn write_frame(w: &mut impl Write, msg_type: MsgType, payload: &[u8]) -> Result<()> {
    let bytes = encode_frame(msg_type, payload)?;
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| LabError::Protocol(format!("write failed: {}", e)))
}

/// Read exactly one frame; a stream that ends mid-frame yields a "truncated"
/// error and never a partial message.
pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)
        .map_err(|e| LabError::Protocol(format!("truncated frame header: {}", e)))?;
    let len = u32::from_be_bytes([head[0], head[1], head[2], head[3]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(LabError::Protocol(format!("declared payload {} exceeds cap", len)));
    }
    let msg_type = MsgType::try_from(head[4])?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|e| LabError::Protocol(format!("truncated payload: {}", e)))?;
    Ok(Frame { msg_type, payload })
}

fn to_json(v: &impl Serialize) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| LabError::Protocol(format!("encode: {}", e)))
}

fn from_json<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| LabError::Protocol(format!("decode: {}", e)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub dataset_digest: String,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReq {
    pub count: u64,
    pub horizon: usize,
    pub seed: u64,
    pub stream_id: u64,
    pub counter_base: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrMsg {
    pub message: String,
}

impl Hello {
    pub fn encode(&self) -> Result<Vec<u8>> {
        to_json(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        from_json(bytes)
    }
}

impl SampleReq {
    pub fn encode(&self) -> Result<Vec<u8>> {
        to_json(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        from_json(bytes)
    }
}

impl ErrMsg {
    pub fn encode(&self) -> Result<Vec<u8>> {
        to_json(self)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        from_json(bytes)
    }
}

/// Header of one SAMPLE payload; the body length is fully determined by
/// `(1 + horizon) · channels · crop` at 4 bytes per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub dataset_digest: String,
    pub t0: usize,
    pub origin: (usize, usize),
    pub crop: (usize, usize),
    pub horizon: usize,
    pub channels: usize,
    pub dtype: String,
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl SampleHeader {
    pub fn body_values(&self) -> usize {
        (1 + self.horizon) * self.channels * self.crop.0 * self.crop.1
    }
}

/// Assemble a SAMPLE payload from standardized values (cast to `f32`).
pub fn encode_sample(header: &SampleHeader, input: &[f32], targets: &[Vec<f32>]) -> Result<Vec<u8>> {
    let per = header.channels * header.crop.0 * header.crop.1;
    if header.dtype != "f32" {
        return Err(LabError::Protocol(format!("unsupported dtype {}", header.dtype)));
    }
    if input.len() != per || targets.len() != header.horizon || targets.iter().any(|t| t.len() != per)
    {
        return Err(LabError::Protocol("sample body does not match header arithmetic".into()));
    }
    let hdr = to_json(header)?;
    let mut out = Vec::with_capacity(4 + hdr.len() + header.body_values() * 4);
    out.extend_from_slice(&(hdr.len() as u32).to_be_bytes());
    out.extend_from_slice(&hdr);
    for v in input.iter().chain(targets.iter().flatten()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Split a SAMPLE payload into its header and flat `f32` body (input first,
/// then targets in time order).
pub fn decode_sample(payload: &[u8]) -> Result<(SampleHeader, Vec<f32>)> {
    if payload.len() < 4 {
        return Err(LabError::Protocol("sample payload shorter than header prefix".into()));
    }
    let hlen = u32::from_be_bytes([payload[0], payload[1], payload[2], payload[3]]) as usize;
    let rest = &payload[4..];
    if rest.len() < hlen {
        return Err(LabError::Protocol("sample header truncated".into()));
    }
    let header: SampleHeader = from_json(&rest[..hlen])?;
    if header.dtype != "f32" {
        return Err(LabError::Protocol(format!("unsupported dtype {}", header.dtype)));
    }
    let body = &rest[hlen..];
    if body.len() != header.body_values() * 4 {
        return Err(LabError::Protocol(format!(
            "sample body has {} bytes, header arithmetic requires {}",
            body.len(),
            header.body_values() * 4
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header, values))
}
