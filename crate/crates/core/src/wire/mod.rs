//! Text framing for everything that crosses an MSBC connection.
//!
//! Every frame starts with `MSBC <kind> <txn>`, followed by `key: value`
//! header lines and an empty line, all CRLF terminated. Frames with a
//! `Length` header (SEND, SIGNAL) then carry exactly that many raw bytes and
//! a closing CRLF. Payloads are never scanned for delimiters, so they may
//! contain any byte sequence.

mod codec;
mod frame;
mod ids;

pub use codec::{decode_stream, encode_frame, encode_into, parse_frame, CodecError, FrameCodec};
pub use frame::{
    param, AccessType, CSeq, ControlMessage, DeliveryReport, Frame, Method, ReportStatus, Role,
    Security, SessionOffer, SignalMessage, SignalStart, Verb, WirePacket, DEFAULT_FRAME_SIZE,
    MAX_FRAME_SIZE, MIN_FRAME_SIZE,
};
pub use ids::{Ctid, TxnGenerator, TxnId, WireId};

use thiserror::Error;

/// A frame or field that does not satisfy the protocol's invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("invalid ctid {0:?}")]
    InvalidCtid(String),
    #[error("invalid transaction id {0:?}")]
    InvalidTxn(String),
    #[error("invalid {0} value {1:?}")]
    InvalidField(&'static str, String),
    #[error("{0} requires a {1} param")]
    MissingParam(Verb, &'static str),
    #[error("asgw role requires a provider")]
    MissingProvider,
    #[error("message requires a session offer body")]
    MissingBody,
    #[error("message must not carry a body")]
    UnexpectedBody,
    #[error("payload of {len} bytes exceeds limit of {max}")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("bearer frames cannot use the service wire")]
    ServiceWireFrame,
}

/// Malformed input on a stream. The connection must be dropped.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol violation at byte {offset}: {reason}")]
pub struct ProtocolViolation {
    pub offset: usize,
    pub reason: String,
}

impl ProtocolViolation {
    pub(crate) fn new(offset: usize, reason: impl Into<String>) -> Self {
        ProtocolViolation {
            offset,
            reason: reason.into(),
        }
    }
}
