//! Classical channel between the server and its users.
//!
//! Messages are newline-delimited JSON objects with exactly the fields
//! `type`, `session`, `block` and `payload`. Binary data (click bitmaps,
//! bases, disclosed bits) travels as base64 of LSB-first packed bits.
//! The channel is neither authenticated nor encrypted.

mod machine;
mod transport;

pub use machine::{ServerSession, Step, UserEndpoint};
pub use transport::{
    connect_with_retry, pump, run_user, InProcSifter, LineConn, NetSifter, Sifter, SiftPair, Transcript, UserRun,
    DEFAULT_TIMEOUT,
};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::schedule::UserId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("out-of-order block {got} (last completed {last:?})")]
    OutOfOrder { got: u64, last: Option<u64> },
    #[error("peer reported {code}: {message}")]
    Peer { code: String, message: String },
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("connection closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(String),
}

impl LinkError {
    pub fn code(&self) -> &'static str {
        match self {
            LinkError::Parse { .. } => "parse_error",
            LinkError::UnknownType(_) => "unknown_type",
            LinkError::ProtocolViolation(_) => "protocol_violation",
            LinkError::OutOfOrder { .. } => "out_of_order",
            LinkError::Peer { .. } => "peer_error",
            LinkError::Timeout => "timeout",
            LinkError::Closed => "closed",
            LinkError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for LinkError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => LinkError::Timeout,
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted
            | std::io::ErrorKind::BrokenPipe => LinkError::Closed,
            _ => LinkError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub user: UserId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelloAck {
    pub user: UserId,
}

/// Which of the block's `n` pulses produced a single click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockAnnounce {
    pub n: usize,
    pub clicks: Bitmap,
}

/// User bases for the announced pulses, in announcement order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisReveal {
    pub bases: Bitmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiftIndices {
    /// Pulse positions kept in the sifted key.
    pub kept: Vec<u32>,
    /// Server bases for the announced pulses, in announcement order.
    pub server_bases: Bitmap,
    /// Positions in the sifted string to disclose.
    pub sample: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QberSample {
    pub bits: Bitmap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QberResult {
    pub sampled: u64,
    pub errors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensateNotice {
    pub coarse: u32,
    pub fine: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Hello(Hello),
    HelloAck(HelloAck),
    BlockAnnounce(BlockAnnounce),
    BasisReveal(BasisReveal),
    SiftIndices(SiftIndices),
    QberSample(QberSample),
    QberResult(QberResult),
    CompensateNotice(CompensateNotice),
    Bye,
    Error(ErrorBody),
}

impl Body {
    pub fn type_name(&self) -> &'static str {
        match self {
            Body::Hello(_) => "HELLO",
            Body::HelloAck(_) => "HELLO_ACK",
            Body::BlockAnnounce(_) => "BLOCK_ANNOUNCE",
            Body::BasisReveal(_) => "BASIS_REVEAL",
            Body::SiftIndices(_) => "SIFT_INDICES",
            Body::QberSample(_) => "QBER_SAMPLE",
            Body::QberResult(_) => "QBER_RESULT",
            Body::CompensateNotice(_) => "COMPENSATE_NOTICE",
            Body::Bye => "BYE",
            Body::Error(_) => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub session: u64,
    pub block: u64,
    pub body: Body,
}

impl Message {
    pub fn new(session: u64, block: u64, body: Body) -> Self {
        Self { session, block, body }
    }

    pub fn error(session: u64, block: u64, err: &LinkError) -> Self {
        Self::new(
            session,
            block,
            Body::Error(ErrorBody {
                code: err.code().to_string(),
                message: err.to_string(),
            }),
        )
    }
}

#[derive(Serialize)]
struct WireOut<'a, P: Serialize> {
    #[serde(rename = "type")]
    kind: &'a str,
    session: u64,
    block: u64,
    payload: P,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    #[serde(rename = "type")]
    kind: String,
    session: u64,
    block: u64,
    #[serde(default)]
    payload: Value,
}

/// One line of JSON, without the trailing newline.
pub fn encode(msg: &Message) -> String {
    fn out<P: Serialize>(msg: &Message, payload: P) -> String {
        serde_json::to_string(&WireOut {
            kind: msg.body.type_name(),
            session: msg.session,
            block: msg.block,
            payload,
        })
        .expect("message types serialize infallibly")
    }
    match &msg.body {
        Body::Hello(p) => out(msg, p),
        Body::HelloAck(p) => out(msg, p),
        Body::BlockAnnounce(p) => out(msg, p),
        Body::BasisReveal(p) => out(msg, p),
        Body::SiftIndices(p) => out(msg, p),
        Body::QberSample(p) => out(msg, p),
        Body::QberResult(p) => out(msg, p),
        Body::CompensateNotice(p) => out(msg, p),
        Body::Bye => out(msg, serde_json::Map::new()),
        Body::Error(p) => out(msg, p),
    }
}

pub fn decode(line: &str) -> Result<Message, LinkError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let wire: WireIn = serde_json::from_str(line).map_err(|e| LinkError::Parse {
        offset: byte_offset(line, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let payload_at = line.find("\"payload\"").unwrap_or(0);
    fn typed<T: serde::de::DeserializeOwned>(v: Value, at: usize) -> Result<T, LinkError> {
        serde_json::from_value(v).map_err(|e| LinkError::Parse {
            offset: at,
            message: e.to_string(),
        })
    }
    let p = wire.payload;
    let body = match wire.kind.as_str() {
        "HELLO" => Body::Hello(typed(p, payload_at)?),
        "HELLO_ACK" => Body::HelloAck(typed(p, payload_at)?),
        "BLOCK_ANNOUNCE" => Body::BlockAnnounce(typed(p, payload_at)?),
        "BASIS_REVEAL" => Body::BasisReveal(typed(p, payload_at)?),
        "SIFT_INDICES" => Body::SiftIndices(typed(p, payload_at)?),
        "QBER_SAMPLE" => Body::QberSample(typed(p, payload_at)?),
        "QBER_RESULT" => Body::QberResult(typed(p, payload_at)?),
        "COMPENSATE_NOTICE" => Body::CompensateNotice(typed(p, payload_at)?),
        "BYE" => Body::Bye,
        "ERROR" => Body::Error(typed(p, payload_at)?),
        other => return Err(LinkError::UnknownType(other.to_string())),
    };
    Ok(Message::new(wire.session, wire.block, body))
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Bits packed LSB first into bytes, base64 on the wire.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bitmap {
    pub len: usize,
    pub data: String,
}

impl Bitmap {
    pub fn from_bits<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut bytes = Vec::new();
        let mut len = 0;
        for b in bits {
            if len % 8 == 0 {
                bytes.push(0u8);
            }
            if b {
                *bytes.last_mut().expect("pushed above") |= 1 << (len % 8);
            }
            len += 1;
        }
        Self {
            len,
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_u8s(bits: &[u8]) -> Self {
        Self::from_bits(bits.iter().map(|&b| b & 1 == 1))
    }

    pub fn bits(&self) -> Result<Vec<bool>, LinkError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| LinkError::ProtocolViolation(format!("bad bitmap encoding: {e}")))?;
        if bytes.len() != self.len.div_ceil(8) {
            return Err(LinkError::ProtocolViolation(format!(
                "bitmap of {} bits carries {} bytes",
                self.len,
                bytes.len()
            )));
        }
        Ok((0..self.len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
    }

    pub fn u8s(&self) -> Result<Vec<u8>, LinkError> {
        Ok(self.bits()?.into_iter().map(u8::from).collect())
    }
}
