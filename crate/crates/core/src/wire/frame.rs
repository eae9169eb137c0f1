//! Frame codec: `len (4 bytes, big-endian) || UTF-8 JSON {"t", "sid", "body"}`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::WireError;

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FrameType {
    Hello,
    Challenge,
    Auth,
    Open,
    Query,
    Result,
    Subscribe,
    Event,
    Ack,
    Resolve,
    Resolved,
    Error,
    Bye,
}

impl FrameType {
    pub const ALL: [FrameType; 13] = [
        FrameType::Hello,
        FrameType::Challenge,
        FrameType::Auth,
        FrameType::Open,
        FrameType::Query,
        FrameType::Result,
        FrameType::Subscribe,
        FrameType::Event,
        FrameType::Ack,
        FrameType::Resolve,
        FrameType::Resolved,
        FrameType::Error,
        FrameType::Bye,
    ];

    /// Frames that carry requests or data and need an open session.
    pub fn is_data(self) -> bool {
        matches!(
            self,
            FrameType::Query
                | FrameType::Result
                | FrameType::Subscribe
                | FrameType::Event
                | FrameType::Ack
                | FrameType::Resolve
                | FrameType::Resolved
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub t: FrameType,
    pub sid: String,
    pub body: Map<String, Value>,
}

impl Frame {
    pub fn new(t: FrameType, sid: &str, body: Value) -> Self {
        let body = match body {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => {
                let mut m = Map::new();
                m.insert("value".into(), other);
                m
            }
        };
        Self {
            t,
            sid: sid.to_string(),
            body,
        }
    }
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let json = serde_json::to_vec(frame).expect("frames serialize");
    if json.len() > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(json.len()));
    }
    let mut out = Vec::with_capacity(4 + json.len());
    out.extend_from_slice(&(json.len() as u32).to_be_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

/// Decodes exactly one frame occupying all of `bytes`.
pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
    let mut cursor = io::Cursor::new(bytes);
    let frame = read_frame(&mut cursor)?;
    if cursor.position() as usize != bytes.len() {
        return Err(WireError::ProtocolViolation("trailing bytes after frame".into()));
    }
    Ok(frame)
}

fn io_to_wire(e: io::Error) -> WireError {
    match e.kind() {
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::NotConnected => WireError::TransportClosed,
        _ => WireError::Io(e.to_string()),
    }
}

/// Reads one frame. A clean end of stream before any byte of a frame is
/// `TransportClosed`; anything cut short mid-frame is a protocol violation.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Frame, WireError> {
    let mut len_bytes = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len_bytes[got..]) {
            Ok(0) if got == 0 => return Err(WireError::TransportClosed),
            Ok(0) => return Err(WireError::ProtocolViolation("truncated length prefix".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(io_to_wire(e)),
        }
    }
    let len = u32::from_be_bytes(len_bytes) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::ProtocolViolation(format!(
            "frame length {len} exceeds {MAX_FRAME_LEN}"
        )));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::ProtocolViolation("truncated frame body".into()),
        _ => io_to_wire(e),
    })?;
    let text = std::str::from_utf8(&body).map_err(|_| WireError::ProtocolViolation("frame is not UTF-8".into()))?;
    serde_json::from_str(text).map_err(|e| WireError::ProtocolViolation(format!("bad frame json: {e}")))
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, frame: &Frame) -> Result<(), WireError> {
    let bytes = encode(frame)?;
    w.write_all(&bytes).map_err(io_to_wire)?;
    w.flush().map_err(io_to_wire)
}
