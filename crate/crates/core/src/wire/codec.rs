use std::io;

use bytes::{Buf, BufMut, Bytes, BytesMut};
use thiserror::Error;
use tokio_util::codec::{Decoder, Encoder};

use super::frame::{
    is_header_key, is_header_value, ControlMessage, DeliveryReport, Frame, ReportStatus,
    SessionOffer, SignalMessage, SignalStart, WirePacket, MAX_FRAME_SIZE,
};
use super::ids::{parse_decimal, TxnId, WireId};
use super::{ProtocolViolation, WireError};

const MAGIC: &[u8] = b"MSBC ";
const CRLF: &[u8] = b"\r\n";
const MAX_LINE: usize = 1024;
const MAX_HEADERS: usize = 64;
const MAX_SIGNAL_BODY: usize = 4096;

/// Serializes one frame.
pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    let mut out = BytesMut::new();
    encode_into(frame, &mut out)?;
    Ok(out.to_vec())
}

/// Serializes one frame onto the end of `out`. Nothing is written on error.
pub fn encode_into(frame: &Frame, out: &mut BytesMut) -> Result<(), WireError> {
    validate(frame)?;
    let mut head = String::with_capacity(128);
    head.push_str("MSBC ");
    head.push_str(frame.kind());
    head.push(' ');
    head.push_str(frame.txn().as_str());
    head.push_str("\r\n");

    let mut push = |key: &str, value: &dyn std::fmt::Display| {
        use std::fmt::Write;
        let _ = write!(head, "{key}: {value}\r\n");
    };

    let payload: Option<Bytes> = match frame {
        Frame::Send(pkt) => {
            push("Wire", &pkt.wire);
            push("Seq", &pkt.seq);
            push("Length", &pkt.payload.len());
            Some(pkt.payload.clone())
        }
        Frame::Report(rep) => {
            push("Wire", &rep.wire);
            push("Seq", &rep.seq);
            push("Status", &rep.status.code());
            None
        }
        Frame::Control(_, msg) => {
            push("Wire", &0);
            push("Verb", &msg.verb);
            for (k, v) in msg.params() {
                push(k, v);
            }
            None
        }
        Frame::Signal(_, sig) => {
            match &sig.start {
                SignalStart::Request(m) => push("Method", &m.as_str()),
                SignalStart::Response { status, reason } => {
                    push("Status", status);
                    push("Reason", reason);
                }
            }
            push("From", &sig.from);
            push("To", &sig.to);
            push("Call-ID", &sig.call_id);
            push("CSeq", &sig.cseq);
            push("Access-Type", &sig.access);
            let body = sig.body.as_ref().map(encode_offer).unwrap_or_default();
            push("Length", &body.len());
            Some(Bytes::from(body))
        }
    };
    head.push_str("\r\n");

    out.reserve(head.len() + payload.as_ref().map_or(0, |p| p.len() + 2));
    out.put_slice(head.as_bytes());
    if let Some(payload) = payload {
        out.put_slice(&payload);
        out.put_slice(CRLF);
    }
    Ok(())
}

fn encode_offer(offer: &SessionOffer) -> Vec<u8> {
    let mut body = format!(
        "security: {}\r\nmax-frame-size: {}\r\npayload-endpoint: {}\r\nrole: {}\r\n",
        offer.security, offer.max_frame_size, offer.payload_endpoint, offer.role
    );
    if let Some(provider) = &offer.provider {
        body.push_str("provider: ");
        body.push_str(provider);
        body.push_str("\r\n");
    }
    body.into_bytes()
}

fn validate(frame: &Frame) -> Result<(), WireError> {
    match frame {
        Frame::Send(pkt) => {
            if pkt.wire.is_service() {
                return Err(WireError::ServiceWireFrame);
            }
            if pkt.payload.len() > MAX_FRAME_SIZE {
                return Err(WireError::PayloadTooLarge {
                    len: pkt.payload.len(),
                    max: MAX_FRAME_SIZE,
                });
            }
            Ok(())
        }
        Frame::Report(rep) => {
            if rep.wire.is_service() {
                return Err(WireError::ServiceWireFrame);
            }
            if !(100..=999).contains(&rep.status.code()) {
                return Err(WireError::InvalidField(
                    "Status",
                    rep.status.code().to_string(),
                ));
            }
            Ok(())
        }
        Frame::Control(_, msg) => msg.validate(),
        Frame::Signal(_, sig) => sig.validate(),
    }
}

/// Parses every complete frame at the start of `buffer`.
///
/// Returns the frames and how many bytes they occupied; a trailing partial
/// frame is left unconsumed.
pub fn decode_stream(buffer: &[u8]) -> Result<(Vec<Frame>, usize), ProtocolViolation> {
    let mut frames = Vec::new();
    let mut consumed = 0;
    while consumed < buffer.len() {
        match parse_frame(&buffer[consumed..], MAX_FRAME_SIZE) {
            Ok(Some((frame, used))) => {
                frames.push(frame);
                consumed += used;
            }
            Ok(None) => break,
            Err(mut err) => {
                err.offset += consumed;
                return Err(err);
            }
        }
    }
    Ok((frames, consumed))
}

struct Lines<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Lines<'a> {
    /// Next CRLF terminated line, `None` if the buffer ends first.
    fn next(&mut self) -> Result<Option<(usize, &'a str)>, ProtocolViolation> {
        let start = self.pos;
        let limit = self.buf.len().min(start + MAX_LINE + 2);
        let mut i = start;
        while i < limit {
            match self.buf[i] {
                b'\n' => {
                    return Err(ProtocolViolation::new(i, "bare LF"));
                }
                b'\r' => {
                    if i + 1 == self.buf.len() {
                        return Ok(None);
                    }
                    if self.buf[i + 1] != b'\n' {
                        return Err(ProtocolViolation::new(i, "bare CR"));
                    }
                    let line = std::str::from_utf8(&self.buf[start..i])
                        .map_err(|_| ProtocolViolation::new(start, "line is not UTF-8"))?;
                    self.pos = i + 2;
                    return Ok(Some((start, line)));
                }
                _ => i += 1,
            }
        }
        if limit - start > MAX_LINE {
            return Err(ProtocolViolation::new(start, "line too long"));
        }
        Ok(None)
    }
}

/// Tries to parse one frame from the start of `buf`.
///
/// `Ok(None)` means `buf` is a valid but incomplete prefix. Offsets in the
/// error are relative to `buf`.
pub fn parse_frame(
    buf: &[u8],
    max_payload: usize,
) -> Result<Option<(Frame, usize)>, ProtocolViolation> {
    let probe = buf.len().min(MAGIC.len());
    if buf[..probe] != MAGIC[..probe] {
        return Err(ProtocolViolation::new(0, "frame must start with \"MSBC \""));
    }
    let mut lines = Lines { buf, pos: 0 };
    let Some((_, start)) = lines.next()? else {
        return Ok(None);
    };
    let mut parts = start[MAGIC.len()..].splitn(2, ' ');
    let kind = parts.next().unwrap_or_default();
    let txn = parts
        .next()
        .ok_or_else(|| ProtocolViolation::new(0, "start line lacks a transaction id"))?;
    let txn = TxnId::new(txn).map_err(|e| ProtocolViolation::new(0, e.to_string()))?;
    if !matches!(kind, "SEND" | "REPORT" | "CONTROL" | "SIGNAL") {
        return Err(ProtocolViolation::new(
            5,
            format!("unknown frame kind {kind:?}"),
        ));
    }

    let mut headers: Vec<(usize, &str, &str)> = Vec::new();
    loop {
        let Some((at, line)) = lines.next()? else {
            return Ok(None);
        };
        if line.is_empty() {
            break;
        }
        if headers.len() == MAX_HEADERS {
            return Err(ProtocolViolation::new(at, "too many header lines"));
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| ProtocolViolation::new(at, "header line lacks \": \""))?;
        if !is_header_key(key) || !is_header_value(value) {
            return Err(ProtocolViolation::new(
                at,
                format!("malformed header {key:?}"),
            ));
        }
        headers.push((at, key, value));
    }
    let body_at = lines.pos;
    let headers = Headers(headers);

    let frame = match kind {
        "SEND" => {
            let wire = headers.wire()?;
            let seq = headers.decimal::<u64>("Seq")?;
            let (len_at, len) = headers.length(max_payload)?;
            let Some(payload) = take_payload(buf, body_at, len, len_at)? else {
                return Ok(None);
            };
            let frame = Frame::Send(WirePacket {
                txn,
                wire,
                seq,
                payload: Bytes::copy_from_slice(payload),
            });
            validate(&frame).map_err(|e| ProtocolViolation::new(0, e.to_string()))?;
            return Ok(Some((frame, body_at + len + 2)));
        }
        "REPORT" => Frame::Report(DeliveryReport {
            txn,
            wire: headers.wire()?,
            seq: headers.decimal::<u64>("Seq")?,
            status: ReportStatus::from_code(headers.decimal::<u16>("Status")?),
        }),
        "CONTROL" => Frame::Control(txn, control_from(&headers)?),
        _ => {
            let (len_at, len) = headers.length(MAX_SIGNAL_BODY)?;
            let Some(body) = take_payload(buf, body_at, len, len_at)? else {
                return Ok(None);
            };
            let sig = signal_from(&headers, body, body_at)?;
            return Ok(Some((Frame::Signal(txn, sig), body_at + len + 2)));
        }
    };
    validate(&frame).map_err(|e| ProtocolViolation::new(0, e.to_string()))?;
    Ok(Some((frame, body_at)))
}

fn take_payload(
    buf: &[u8],
    at: usize,
    len: usize,
    len_at: usize,
) -> Result<Option<&[u8]>, ProtocolViolation> {
    let end = at + len;
    if buf.len() < end + 2 {
        // Reject early if the bytes we already have cannot be the terminator.
        let have = &buf[end.min(buf.len())..];
        if !CRLF.starts_with(have) {
            return Err(ProtocolViolation::new(end, "payload not followed by CRLF"));
        }
        return Ok(None);
    }
    if &buf[end..end + 2] != CRLF {
        return Err(ProtocolViolation::new(
            end,
            format!("payload length declared at byte {len_at} not followed by CRLF"),
        ));
    }
    Ok(Some(&buf[at..end]))
}

struct Headers<'a>(Vec<(usize, &'a str, &'a str)>);

impl<'a> Headers<'a> {
    fn find(&self, key: &str) -> Result<Option<(usize, &'a str)>, ProtocolViolation> {
        let mut found = None;
        for &(at, k, v) in &self.0 {
            if k == key {
                if found.is_some() {
                    return Err(ProtocolViolation::new(
                        at,
                        format!("duplicate {key} header"),
                    ));
                }
                found = Some((at, v));
            }
        }
        Ok(found)
    }

    fn require(&self, key: &str) -> Result<(usize, &'a str), ProtocolViolation> {
        self.find(key)?
            .ok_or_else(|| ProtocolViolation::new(0, format!("missing {key} header")))
    }

    fn decimal<T: std::str::FromStr>(&self, key: &str) -> Result<T, ProtocolViolation> {
        let (at, v) = self.require(key)?;
        parse_decimal(v).ok_or_else(|| ProtocolViolation::new(at, format!("bad {key} value")))
    }

    fn wire(&self) -> Result<WireId, ProtocolViolation> {
        Ok(WireId(self.decimal::<u32>("Wire")?))
    }

    fn length(&self, max: usize) -> Result<(usize, usize), ProtocolViolation> {
        let (at, _) = self.require("Length")?;
        let len = self.decimal::<usize>("Length")?;
        if len > max {
            return Err(ProtocolViolation::new(
                at,
                format!("Length {len} exceeds {max}"),
            ));
        }
        Ok((at, len))
    }
}

fn control_from(headers: &Headers<'_>) -> Result<ControlMessage, ProtocolViolation> {
    let mut it = headers.0.iter();
    match it.next() {
        Some(&(_, "Wire", "0")) => {}
        Some(&(at, _, _)) => {
            return Err(ProtocolViolation::new(
                at,
                "control frames must start with Wire: 0",
            ))
        }
        None => return Err(ProtocolViolation::new(0, "control frame without headers")),
    }
    let verb = match it.next() {
        Some(&(at, "Verb", v)) => v
            .parse()
            .map_err(|_| ProtocolViolation::new(at, format!("unknown verb {v:?}")))?,
        Some(&(at, _, _)) => return Err(ProtocolViolation::new(at, "Verb must follow Wire")),
        None => return Err(ProtocolViolation::new(0, "control frame without Verb")),
    };
    let mut msg = ControlMessage::new(verb);
    for &(at, key, value) in it {
        if key == "Verb" || msg.get(key).is_some() {
            return Err(ProtocolViolation::new(at, format!("duplicate param {key}")));
        }
        msg.set(key, value);
    }
    Ok(msg)
}

fn signal_from(
    headers: &Headers<'_>,
    body: &[u8],
    body_at: usize,
) -> Result<SignalMessage, ProtocolViolation> {
    let field =
        |key: &str| -> Result<String, ProtocolViolation> { Ok(headers.require(key)?.1.to_owned()) };
    let parsed = |key: &str| -> Result<(usize, &str), ProtocolViolation> { headers.require(key) };

    let start = match headers.find("Method")? {
        Some((at, m)) => {
            if headers.find("Status")?.is_some() {
                return Err(ProtocolViolation::new(at, "both Method and Status present"));
            }
            SignalStart::Request(
                m.parse()
                    .map_err(|_| ProtocolViolation::new(at, format!("unknown method {m:?}")))?,
            )
        }
        None => SignalStart::Response {
            status: headers.decimal::<u16>("Status")?,
            reason: field("Reason")?,
        },
    };
    let (cseq_at, cseq) = parsed("CSeq")?;
    let (access_at, access) = parsed("Access-Type")?;
    let body = if body.is_empty() {
        None
    } else {
        Some(parse_offer(body, body_at)?)
    };
    let sig = SignalMessage {
        start,
        from: field("From")?,
        to: field("To")?,
        call_id: field("Call-ID")?,
        cseq: cseq
            .parse()
            .map_err(|_| ProtocolViolation::new(cseq_at, "bad CSeq"))?,
        access: access
            .parse()
            .map_err(|_| ProtocolViolation::new(access_at, "bad Access-Type"))?,
        body,
    };
    sig.validate()
        .map_err(|e| ProtocolViolation::new(0, e.to_string()))?;
    Ok(sig)
}

fn parse_offer(body: &[u8], body_at: usize) -> Result<SessionOffer, ProtocolViolation> {
    let mut lines = Lines { buf: body, pos: 0 };
    let mut fields: Vec<(usize, &str, &str)> = Vec::new();
    while lines.pos < body.len() {
        let (at, line) = lines
            .next()
            .map_err(|e| ProtocolViolation::new(body_at + e.offset, e.reason))?
            .ok_or_else(|| ProtocolViolation::new(body_at + lines.pos, "unterminated body line"))?;
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| ProtocolViolation::new(body_at + at, "body line lacks \": \""))?;
        if fields.iter().any(|(_, key, _)| *key == k) {
            return Err(ProtocolViolation::new(
                body_at + at,
                format!("duplicate {k}"),
            ));
        }
        fields.push((body_at + at, k, v));
    }
    let get = |key: &str| {
        fields
            .iter()
            .find(|(_, k, _)| *k == key)
            .map(|&(at, _, v)| (at, v))
    };
    let need = |key: &str| {
        get(key).ok_or_else(|| ProtocolViolation::new(body_at, format!("offer lacks {key}")))
    };
    let bad = |at: usize, key: &str| ProtocolViolation::new(at, format!("bad {key}"));

    let (at, security) = need("security")?;
    let security = security.parse().map_err(|_| bad(at, "security"))?;
    let (at, size) = need("max-frame-size")?;
    let max_frame_size = parse_decimal(size).ok_or_else(|| bad(at, "max-frame-size"))?;
    let (_, endpoint) = need("payload-endpoint")?;
    let (at, role) = need("role")?;
    let role = role.parse().map_err(|_| bad(at, "role"))?;
    let offer = SessionOffer {
        security,
        max_frame_size,
        payload_endpoint: endpoint.to_owned(),
        role,
        provider: get("provider").map(|(_, p)| p.to_owned()),
    };
    offer
        .validate()
        .map_err(|e| ProtocolViolation::new(body_at, e.to_string()))?;
    Ok(offer)
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Violation(#[from] ProtocolViolation),
    #[error(transparent)]
    Invalid(#[from] WireError),
}

/// Stream codec for use with `tokio_util::codec::Framed`.
///
/// Each connection owns one; it carries no state besides the payload limit.
#[derive(Debug, Clone)]
pub struct FrameCodec {
    max_payload: usize,
}

impl FrameCodec {
    pub fn new(max_payload: usize) -> Self {
        FrameCodec {
            max_payload: max_payload.min(MAX_FRAME_SIZE),
        }
    }

    pub fn set_max_payload(&mut self, max_payload: usize) {
        self.max_payload = max_payload.min(MAX_FRAME_SIZE);
    }
}

impl Default for FrameCodec {
    fn default() -> Self {
        FrameCodec::new(MAX_FRAME_SIZE)
    }
}

impl Decoder for FrameCodec {
    type Item = Frame;
    type Error = CodecError;

    fn decode(&mut self, src: &mut BytesMut) -> Result<Option<Frame>, CodecError> {
        if src.is_empty() {
            return Ok(None);
        }
        match parse_frame(src, self.max_payload)? {
            Some((frame, used)) => {
                src.advance(used);
                Ok(Some(frame))
            }
            None => Ok(None),
        }
    }
}

impl Encoder<Frame> for FrameCodec {
    type Error = CodecError;

    fn encode(&mut self, frame: Frame, dst: &mut BytesMut) -> Result<(), CodecError> {
        encode_into(&frame, dst)?;
        Ok(())
    }
}

impl Encoder<&Frame> for FrameCodec {
    type Error = CodecError;

    fn encode(&mut self, frame: &Frame, dst: &mut BytesMut) -> Result<(), CodecError> {
        encode_into(frame, dst)?;
        Ok(())
    }
}
