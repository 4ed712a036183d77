//! Binary framing shared by devices, the relay and clients.
//!
//! Every message is a 12-byte little-endian header followed by a typed
//! payload:
//!
//! ```text
//! magic u32 = 0x41565452 | version u8 = 1 | type u8 | flags u16 | payload_len u32
//! ```
//!
//! Messages are self-delimiting, so a byte stream of concatenated messages
//! parses back into the same sequence.

use std::io::{self, Read};

use avatar_core::frame::{StageId, StageStamp};
use thiserror::Error;

pub const MAGIC: u32 = 0x4156_5452;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 12;
/// Upper bound on a payload; larger declared lengths are rejected before
/// allocating.
pub const MAX_PAYLOAD: usize = 256 << 20;

/// Header flag: the relay could not process this frame and forwarded it
/// unmodified.
pub const FLAG_STAGE_ERROR: u16 = 1;
/// CONTROL flag: emergency stop.
pub const CONTROL_ESTOP: u16 = 1;

pub mod msg_type {
    pub const HELLO: u8 = 0x01;
    pub const ACK: u8 = 0x02;
    pub const ATTACH: u8 = 0x03;
    pub const LIST_DEVICES: u8 = 0x04;
    pub const FRAME: u8 = 0x05;
    pub const CONTROL: u8 = 0x06;
    pub const DEVICE_LIST: u8 = 0x07;
    pub const ERROR: u8 = 0x08;
    pub const PING: u8 = 0x09;
    pub const PONG: u8 = 0x0A;
    pub const CONTROL_APPLIED: u8 = 0x0B;
}

/// Codes carried by ERROR messages.
pub mod error_code {
    pub const DUPLICATE_ID: u8 = 0x01;
    pub const UNKNOWN_DEVICE: u8 = 0x02;
    pub const NOT_ATTACHED: u8 = 0x03;
    pub const NO_AUTHORITY: u8 = 0x04;
    pub const BAD_MESSAGE: u8 = 0x05;
    pub const HELLO_REQUIRED: u8 = 0x06;
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("declared payload length {declared} but {actual} bytes follow")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("payload length {0} exceeds limit")]
    TooLarge(usize),
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    /// Stable numeric code per error class.
    pub fn code(&self) -> u8 {
        match self {
            WireError::BadMagic(_) => 1,
            WireError::BadVersion(_) => 2,
            WireError::Truncated { .. } | WireError::LengthMismatch { .. } | WireError::TooLarge(_) => 3,
            WireError::UnknownType(_) => 4,
            WireError::Malformed(_) => 5,
            WireError::Io(_) => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub msg_type: u8,
    pub flags: u16,
    pub payload_len: u32,
}

impl Header {
    /// Parses and validates the first [`HEADER_LEN`] bytes of `buf`.
    pub fn parse(buf: &[u8]) -> Result<Self, WireError> {
        if buf.len() < HEADER_LEN {
            return Err(WireError::Truncated {
                need: HEADER_LEN,
                have: buf.len(),
            });
        }
        let magic = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if buf[4] != VERSION {
            return Err(WireError::BadVersion(buf[4]));
        }
        let h = Header {
            version: buf[4],
            msg_type: buf[5],
            flags: u16::from_le_bytes([buf[6], buf[7]]),
            payload_len: u32::from_le_bytes(buf[8..12].try_into().unwrap()),
        };
        if !(msg_type::HELLO..=msg_type::CONTROL_APPLIED).contains(&h.msg_type) {
            return Err(WireError::UnknownType(h.msg_type));
        }
        if h.payload_len as usize > MAX_PAYLOAD {
            return Err(WireError::TooLarge(h.payload_len as usize));
        }
        Ok(h)
    }

    pub fn message_len(&self) -> usize {
        HEADER_LEN + self.payload_len as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Device = 0,
    Client = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub role: Role,
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePayload {
    pub device_id: u32,
    pub seq: u64,
    pub t_capture_ns: u64,
    pub stages: Vec<StageStamp>,
    pub codec: u8,
    pub width: u16,
    pub height: u16,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPayload {
    pub device_id: u32,
    pub seq: u64,
    pub t_send_ns: u64,
    pub linear_mps: f32,
    pub angular_radps: f32,
    pub flags: u16,
    pub opaque: Vec<u8>,
}

impl ControlPayload {
    pub fn estop(&self) -> bool {
        self.flags & CONTROL_ESTOP != 0
    }

    pub fn to_command(&self) -> avatar_core::ControlCommand {
        avatar_core::ControlCommand {
            linear_mps: self.linear_mps as f64,
            angular_radps: self.angular_radps as f64,
            estop: self.estop(),
            opaque: self.opaque.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DeviceStatus {
    Offline = 0,
    Online = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceInfo {
    pub device_id: u32,
    pub status: DeviceStatus,
    pub last_seen_ns: u64,
    pub name: String,
}

/// PING targets.
pub const PING_RELAY: u8 = 0;
pub const PING_DEVICE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ping {
    pub nonce: u64,
    pub target: u8,
    /// Client id the PONG is routed back to.
    pub origin: u32,
    pub t_send_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pong {
    pub nonce: u64,
    pub origin: u32,
    pub t_ping_send_ns: u64,
    pub t_remote_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlApplied {
    pub device_id: u32,
    pub seq: u64,
    pub t_send_ns: u64,
    pub t_applied_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Ack { acked_type: u8, id: u32 },
    Attach { device_id: u32 },
    ListDevices,
    Frame(FramePayload),
    Control(ControlPayload),
    DeviceList(Vec<DeviceInfo>),
    Error { code: u8, message: String },
    Ping(Ping),
    Pong(Pong),
    ControlApplied(ControlApplied),
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::Hello(_) => msg_type::HELLO,
            Message::Ack { .. } => msg_type::ACK,
            Message::Attach { .. } => msg_type::ATTACH,
            Message::ListDevices => msg_type::LIST_DEVICES,
            Message::Frame(_) => msg_type::FRAME,
            Message::Control(_) => msg_type::CONTROL,
            Message::DeviceList(_) => msg_type::DEVICE_LIST,
            Message::Error { .. } => msg_type::ERROR,
            Message::Ping(_) => msg_type::PING,
            Message::Pong(_) => msg_type::PONG,
            Message::ControlApplied(_) => msg_type::CONTROL_APPLIED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub flags: u16,
    pub body: Message,
}

impl From<Message> for WireMessage {
    fn from(body: Message) -> Self {
        Self { flags: 0, body }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    let n = b.len().min(u16::MAX as usize);
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&b[..n]);
}

fn encode_payload(body: &Message, out: &mut Vec<u8>) {
    match body {
        Message::Hello(h) => {
            out.push(h.role as u8);
            out.extend_from_slice(&h.id.to_le_bytes());
            put_str(out, &h.name);
        }
        Message::Ack { acked_type, id } => {
            out.push(*acked_type);
            out.extend_from_slice(&id.to_le_bytes());
        }
        Message::Attach { device_id } => out.extend_from_slice(&device_id.to_le_bytes()),
        Message::ListDevices => {}
        Message::Frame(f) => {
            out.extend_from_slice(&f.device_id.to_le_bytes());
            out.extend_from_slice(&f.seq.to_le_bytes());
            out.extend_from_slice(&f.t_capture_ns.to_le_bytes());
            out.push(f.stages.len() as u8);
            for s in &f.stages {
                out.push(s.stage as u8);
                out.extend_from_slice(&s.t_ns.to_le_bytes());
            }
            out.push(f.codec);
            out.extend_from_slice(&f.width.to_le_bytes());
            out.extend_from_slice(&f.height.to_le_bytes());
            out.extend_from_slice(&(f.data.len() as u32).to_le_bytes());
            out.extend_from_slice(&f.data);
        }
        Message::Control(c) => {
            out.extend_from_slice(&c.device_id.to_le_bytes());
            out.extend_from_slice(&c.seq.to_le_bytes());
            out.extend_from_slice(&c.t_send_ns.to_le_bytes());
            out.extend_from_slice(&c.linear_mps.to_le_bytes());
            out.extend_from_slice(&c.angular_radps.to_le_bytes());
            out.extend_from_slice(&c.flags.to_le_bytes());
            out.extend_from_slice(&(c.opaque.len() as u16).to_le_bytes());
            out.extend_from_slice(&c.opaque);
        }
        Message::DeviceList(list) => {
            out.extend_from_slice(&(list.len() as u16).to_le_bytes());
            for d in list {
                out.extend_from_slice(&d.device_id.to_le_bytes());
                out.push(d.status as u8);
                out.extend_from_slice(&d.last_seen_ns.to_le_bytes());
                put_str(out, &d.name);
            }
        }
        Message::Error { code, message } => {
            out.push(*code);
            put_str(out, message);
        }
        Message::Ping(p) => {
            out.extend_from_slice(&p.nonce.to_le_bytes());
            out.push(p.target);
            out.extend_from_slice(&p.origin.to_le_bytes());
            out.extend_from_slice(&p.t_send_ns.to_le_bytes());
        }
        Message::Pong(p) => {
            out.extend_from_slice(&p.nonce.to_le_bytes());
            out.extend_from_slice(&p.origin.to_le_bytes());
            out.extend_from_slice(&p.t_ping_send_ns.to_le_bytes());
            out.extend_from_slice(&p.t_remote_ns.to_le_bytes());
        }
        Message::ControlApplied(a) => {
            out.extend_from_slice(&a.device_id.to_le_bytes());
            out.extend_from_slice(&a.seq.to_le_bytes());
            out.extend_from_slice(&a.t_send_ns.to_le_bytes());
            out.extend_from_slice(&a.t_applied_ns.to_le_bytes());
        }
    }
}

/// Appends the encoded message to `out`.
pub fn encode_into(msg: &WireMessage, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(msg.body.msg_type());
    out.extend_from_slice(&msg.flags.to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    encode_payload(&msg.body, out);
    let len = (out.len() - start - HEADER_LEN) as u32;
    out[start + 8..start + 12].copy_from_slice(&len.to_le_bytes());
}

pub fn encode_message(msg: &WireMessage) -> Vec<u8> {
    let hint = match &msg.body {
        Message::Frame(f) => f.data.len() + 64 + 9 * f.stages.len(),
        _ => 64,
    };
    let mut out = Vec::with_capacity(hint);
    encode_into(msg, &mut out);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated {
                need: self.pos + n,
                have: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::Malformed("string is not UTF-8"))
    }
}

fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Message, WireError> {
    let mut c = Cursor { buf: payload, pos: 0 };
    let body = match msg_type {
        msg_type::HELLO => {
            let role = match c.u8()? {
                0 => Role::Device,
                1 => Role::Client,
                _ => return Err(WireError::Malformed("unknown role")),
            };
            Message::Hello(Hello {
                role,
                id: c.u32()?,
                name: c.string()?,
            })
        }
        msg_type::ACK => Message::Ack {
            acked_type: c.u8()?,
            id: c.u32()?,
        },
        msg_type::ATTACH => Message::Attach { device_id: c.u32()? },
        msg_type::LIST_DEVICES => Message::ListDevices,
        msg_type::FRAME => {
            let device_id = c.u32()?;
            let seq = c.u64()?;
            let t_capture_ns = c.u64()?;
            let n = c.u8()? as usize;
            let mut stages = Vec::with_capacity(n);
            for _ in 0..n {
                let stage = StageId::from_u8(c.u8()?).ok_or(WireError::Malformed("unknown stage id"))?;
                stages.push(StageStamp { stage, t_ns: c.u64()? });
            }
            if stages.windows(2).any(|w| w[1].t_ns < w[0].t_ns) {
                return Err(WireError::Malformed("stage stamps out of order"));
            }
            let codec = c.u8()?;
            let width = c.u16()?;
            let height = c.u16()?;
            let len = c.u32()? as usize;
            let data = c.take(len)?.to_vec();
            Message::Frame(FramePayload {
                device_id,
                seq,
                t_capture_ns,
                stages,
                codec,
                width,
                height,
                data,
            })
        }
        msg_type::CONTROL => {
            let device_id = c.u32()?;
            let seq = c.u64()?;
            let t_send_ns = c.u64()?;
            let linear_mps = c.f32()?;
            let angular_radps = c.f32()?;
            if !(linear_mps.is_finite() && angular_radps.is_finite()) {
                return Err(WireError::Malformed("non-finite velocity"));
            }
            let flags = c.u16()?;
            let n = c.u16()? as usize;
            Message::Control(ControlPayload {
                device_id,
                seq,
                t_send_ns,
                linear_mps,
                angular_radps,
                flags,
                opaque: c.take(n)?.to_vec(),
            })
        }
        msg_type::DEVICE_LIST => {
            let n = c.u16()? as usize;
            let mut list = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let device_id = c.u32()?;
                let status = match c.u8()? {
                    0 => DeviceStatus::Offline,
                    1 => DeviceStatus::Online,
                    _ => return Err(WireError::Malformed("unknown device status")),
                };
                list.push(DeviceInfo {
                    device_id,
                    status,
                    last_seen_ns: c.u64()?,
                    name: c.string()?,
                });
            }
            Message::DeviceList(list)
        }
        msg_type::ERROR => Message::Error {
            code: c.u8()?,
            message: c.string()?,
        },
        msg_type::PING => Message::Ping(Ping {
            nonce: c.u64()?,
            target: c.u8()?,
            origin: c.u32()?,
            t_send_ns: c.u64()?,
        }),
        msg_type::PONG => Message::Pong(Pong {
            nonce: c.u64()?,
            origin: c.u32()?,
            t_ping_send_ns: c.u64()?,
            t_remote_ns: c.u64()?,
        }),
        msg_type::CONTROL_APPLIED => Message::ControlApplied(ControlApplied {
            device_id: c.u32()?,
            seq: c.u64()?,
            t_send_ns: c.u64()?,
            t_applied_ns: c.u64()?,
        }),
        t => return Err(WireError::UnknownType(t)),
    };
    if c.pos != payload.len() {
        return Err(WireError::LengthMismatch {
            declared: payload.len(),
            actual: c.pos,
        });
    }
    Ok(body)
}

/// Decodes one message from the front of `buf`, returning it and the number
/// of bytes consumed.
pub fn decode_prefix(buf: &[u8]) -> Result<(WireMessage, usize), WireError> {
    let h = Header::parse(buf)?;
    let total = h.message_len();
    if buf.len() < total {
        return Err(WireError::Truncated {
            need: total,
            have: buf.len(),
        });
    }
    let body = decode_payload(h.msg_type, &buf[HEADER_LEN..total])?;
    Ok((WireMessage { flags: h.flags, body }, total))
}

/// Decodes a buffer holding exactly one message.
pub fn decode_message(buf: &[u8]) -> Result<WireMessage, WireError> {
    let (msg, used) = decode_prefix(buf)?;
    if used != buf.len() {
        return Err(WireError::LengthMismatch {
            declared: used - HEADER_LEN,
            actual: buf.len() - HEADER_LEN,
        });
    }
    Ok(msg)
}

/// Decodes a concatenation of messages.
pub fn decode_stream(mut buf: &[u8]) -> Result<Vec<WireMessage>, WireError> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        let (m, used) = decode_prefix(buf)?;
        out.push(m);
        buf = &buf[used..];
    }
    Ok(out)
}

/// Reads one raw, header-validated message from a byte stream. Returns
/// `Ok(None)` on a clean end of stream between messages.
pub fn read_raw<R: Read>(r: &mut R) -> Result<Option<(Header, Vec<u8>)>, WireError> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(WireError::Truncated {
                    need: HEADER_LEN,
                    have: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = Header::parse(&head)?;
    let mut bytes = vec![0u8; h.message_len()];
    bytes[..HEADER_LEN].copy_from_slice(&head);
    r.read_exact(&mut bytes[HEADER_LEN..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated {
            need: h.message_len(),
            have: HEADER_LEN,
        },
        _ => WireError::Io(e),
    })?;
    Ok(Some((h, bytes)))
}

/// Reads and decodes one message from a byte stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<WireMessage>, WireError> {
    match read_raw(r)? {
        None => Ok(None),
        Some((h, bytes)) => Ok(Some(WireMessage {
            flags: h.flags,
            body: decode_payload(h.msg_type, &bytes[HEADER_LEN..])?,
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors_are_distinct() {
        let good = encode_message(&Message::ListDevices.into());
        let mut bad = good.clone();
        bad[0] ^= 1;
        let e1 = decode_message(&bad).unwrap_err();
        let mut bad = good.clone();
        bad[4] = 2;
        let e2 = decode_message(&bad).unwrap_err();
        let e3 = decode_message(&good[..7]).unwrap_err();
        let mut bad = good.clone();
        bad[5] = 0x7f;
        let e4 = decode_message(&bad).unwrap_err();
        let codes = [e1.code(), e2.code(), e3.code(), e4.code()];
        assert!(matches!(e1, WireError::BadMagic(_)));
        assert!(matches!(e2, WireError::BadVersion(2)));
        assert!(matches!(e3, WireError::Truncated { .. }));
        assert!(matches!(e4, WireError::UnknownType(0x7f)));
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(codes[i], codes[j]);
            }
        }
    }

    #[test]
    fn declared_length_must_match_payload() {
        let mut bytes = encode_message(&Message::Attach { device_id: 7 }.into());
        bytes[8] = 5;
        bytes.push(0);
        assert!(matches!(decode_message(&bytes), Err(WireError::LengthMismatch { .. })));
    }

    #[test]
    fn oversized_length_rejected_before_reading() {
        let mut bytes = encode_message(&Message::ListDevices.into());
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        let mut r = &bytes[..];
        assert!(matches!(read_raw(&mut r), Err(WireError::TooLarge(_))));
    }

    #[test]
    fn clean_eof_versus_torn_message() {
        let bytes = encode_message(&Message::Attach { device_id: 1 }.into());
        let mut empty: &[u8] = &[];
        assert!(read_message(&mut empty).unwrap().is_none());
        let mut torn = &bytes[..bytes.len() - 1];
        assert!(matches!(read_message(&mut torn), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn non_finite_control_rejected() {
        let msg: WireMessage = Message::Control(ControlPayload {
            device_id: 1,
            seq: 1,
            t_send_ns: 0,
            linear_mps: f32::NAN,
            angular_radps: 0.0,
            flags: 0,
            opaque: vec![],
        })
        .into();
        assert!(matches!(decode_message(&encode_message(&msg)), Err(WireError::Malformed(_))));
    }
}
