//! Frame encoding. Every frame is `u32 length` (little-endian, counting the
//! bytes after it) followed by a 4-byte magic, a version byte and a `u64`
//! request id.
//!
//! ```text
//! request   "OBFR" ver id  rank u8, dims u32 × rank, payload f32 × product(dims)
//! response  "OBFS" ver id  label u16, num_classes u16, probabilities f32 × num_classes
//! error     "OBFE" ver id  code u16, message_len u16, message UTF-8
//! ```

use std::io::{self, Read, Write};

use super::ProtocolError;

pub const VERSION: u8 = 1;
pub const REQUEST_MAGIC: &[u8; 4] = b"OBFR";
pub const RESPONSE_MAGIC: &[u8; 4] = b"OBFS";
pub const ERROR_MAGIC: &[u8; 4] = b"OBFE";
/// Default cap on the length field of an incoming frame.
pub const DEFAULT_MAX_FRAME: usize = 16 * 1024 * 1024;

/// Error codes carried by `OBFE` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    Malformed = 1,
    UnsupportedVersion = 2,
    ShapeMismatch = 3,
    FrameTooLarge = 4,
    Internal = 5,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::Malformed,
            2 => ErrorCode::UnsupportedVersion,
            3 => ErrorCode::ShapeMismatch,
            4 => ErrorCode::FrameTooLarge,
            5 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

/// One sample to classify. Nothing in it says whether `payload` was
/// obfuscated.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceRequest {
    pub id: u64,
    /// Per-sample shape, without a batch dimension.
    pub shape: Vec<usize>,
    pub payload: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResponse {
    pub id: u64,
    pub label: u16,
    pub probabilities: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorFrame {
    pub id: u64,
    pub code: u16,
    pub message: String,
}

/// Anything the server may send back.
#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Response(InferenceResponse),
    Error(ErrorFrame),
}

fn frame(magic: &[u8; 4], id: u64, body: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut b = vec![0u8; 4];
    b.extend_from_slice(magic);
    b.push(VERSION);
    b.extend_from_slice(&id.to_le_bytes());
    body(&mut b);
    let len = (b.len() - 4) as u32;
    b[..4].copy_from_slice(&len.to_le_bytes());
    b
}

impl InferenceRequest {
    pub fn encode(&self) -> Vec<u8> {
        frame(REQUEST_MAGIC, self.id, |b| {
            b.push(self.shape.len() as u8);
            for &d in &self.shape {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &self.payload {
                b.extend_from_slice(&v.to_le_bytes());
            }
        })
    }

    /// Parses a frame body (everything after the length prefix).
    pub fn decode(body: &[u8]) -> Result<Self, ProtocolError> {
        let mut c = Cursor::new(body, REQUEST_MAGIC)?;
        let id = c.id;
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(ProtocolError::Malformed {
                id,
                reason: format!("sample shape {shape:?} must have positive dimensions"),
            });
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let rest = c.rest();
        if count.and_then(|n| n.checked_mul(4)) != Some(rest.len()) {
            return Err(ProtocolError::Malformed {
                id,
                reason: format!("payload of {} bytes does not match shape {shape:?}", rest.len()),
            });
        }
        let payload = rest
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        Ok(InferenceRequest { id, shape, payload })
    }
}

impl InferenceResponse {
    pub fn encode(&self) -> Vec<u8> {
        frame(RESPONSE_MAGIC, self.id, |b| {
            b.extend_from_slice(&self.label.to_le_bytes());
            b.extend_from_slice(&(self.probabilities.len() as u16).to_le_bytes());
            for p in &self.probabilities {
                b.extend_from_slice(&p.to_le_bytes());
            }
        })
    }
}

impl ErrorFrame {
    pub fn new(id: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        let mut message = message.into();
        if message.len() > u16::MAX as usize {
            let mut cut = u16::MAX as usize;
            while !message.is_char_boundary(cut) {
                cut -= 1;
            }
            message.truncate(cut);
        }
        ErrorFrame {
            id,
            code: code as u16,
            message,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        frame(ERROR_MAGIC, self.id, |b| {
            b.extend_from_slice(&self.code.to_le_bytes());
            b.extend_from_slice(&(self.message.len() as u16).to_le_bytes());
            b.extend_from_slice(self.message.as_bytes());
        })
    }
}

impl Reply {
    pub fn id(&self) -> u64 {
        match self {
            Reply::Response(r) => r.id,
            Reply::Error(e) => e.id,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            Reply::Response(r) => r.encode(),
            Reply::Error(e) => e.encode(),
        }
    }

    pub fn decode(body: &[u8]) -> Result<Self, ProtocolError> {
        match body.get(..4) {
            Some(m) if m == ERROR_MAGIC => {
                let mut c = Cursor::new(body, ERROR_MAGIC)?;
                let code = c.u16()?;
                let len = c.u16()? as usize;
                let rest = c.rest();
                if rest.len() != len {
                    return Err(ProtocolError::Malformed {
                        id: c.id,
                        reason: "error message length".into(),
                    });
                }
                Ok(Reply::Error(ErrorFrame {
                    id: c.id,
                    code,
                    message: String::from_utf8_lossy(rest).into_owned(),
                }))
            }
            _ => {
                let mut c = Cursor::new(body, RESPONSE_MAGIC)?;
                let label = c.u16()?;
                let n = c.u16()? as usize;
                let rest = c.rest();
                if rest.len() != n * 4 {
                    return Err(ProtocolError::Malformed {
                        id: c.id,
                        reason: format!("{} probability bytes for {n} classes", rest.len()),
                    });
                }
                let probabilities = rest
                    .chunks_exact(4)
                    .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
                    .collect();
                Ok(Reply::Response(InferenceResponse {
                    id: c.id,
                    label,
                    probabilities,
                }))
            }
        }
    }
}

/// Best-effort request id of a frame body, for error replies.
pub fn peek_id(body: &[u8]) -> u64 {
    body.get(5..13).map_or(0, |b| u64::from_le_bytes(b.try_into().unwrap()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    id: u64,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<Self, ProtocolError> {
        let id = peek_id(buf);
        if buf.len() < 13 {
            return Err(ProtocolError::Malformed {
                id,
                reason: format!("frame of {} bytes is shorter than the header", buf.len()),
            });
        }
        if &buf[..4] != magic {
            return Err(ProtocolError::Malformed {
                id,
                reason: format!("magic {:?}, expected {:?}", String::from_utf8_lossy(&buf[..4]), String::from_utf8_lossy(magic)),
            });
        }
        if buf[4] != VERSION {
            return Err(ProtocolError::UnsupportedVersion { id, version: buf[4] });
        }
        Ok(Cursor { buf, pos: 13, id })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let s = self.buf.get(self.pos..self.pos + n).ok_or_else(|| ProtocolError::Malformed {
            id: self.id,
            reason: "frame ends inside a field".into(),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let r = &self.buf[self.pos..];
        self.pos = self.buf.len();
        r
    }
}

/// Outcome of reading one length-prefixed frame.
#[derive(Debug)]
pub enum Incoming {
    Frame(Vec<u8>),
    /// Length field above the cap; the body was not read.
    TooLarge(usize),
    /// Clean end of stream before a new frame.
    Closed,
}

pub fn read_frame(r: &mut impl Read, max_frame: usize) -> io::Result<Incoming> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(Incoming::Closed),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > max_frame {
        return Ok(Incoming::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Incoming::Frame(body))
}

pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame)?;
    w.flush()
}
