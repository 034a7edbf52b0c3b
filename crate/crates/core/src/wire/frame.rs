use std::fmt;
use std::str::FromStr;

use bytes::Bytes;

use super::ids::{parse_decimal, Ctid, TxnId, WireId};
use super::WireError;

/// Largest payload any frame may carry, and the upper bound of a negotiated
/// `max-frame-size`.
pub const MAX_FRAME_SIZE: usize = 1_048_576;
/// Smallest acceptable negotiated frame size.
pub const MIN_FRAME_SIZE: usize = 64;
/// Frame size offered when the application does not choose one.
pub const DEFAULT_FRAME_SIZE: usize = 16_384;

/// Payload unit on a bearer wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WirePacket {
    pub txn: TxnId,
    pub wire: WireId,
    pub seq: u64,
    pub payload: Bytes,
}

/// End-to-end acknowledgment of a [`WirePacket`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryReport {
    pub txn: TxnId,
    pub wire: WireId,
    pub seq: u64,
    pub status: ReportStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportStatus {
    Delivered,
    PeerUnavailable,
    NoSuchWire,
    Other(u16),
}

impl ReportStatus {
    pub fn from_code(code: u16) -> Self {
        match code {
            200 => ReportStatus::Delivered,
            480 => ReportStatus::PeerUnavailable,
            481 => ReportStatus::NoSuchWire,
            other => ReportStatus::Other(other),
        }
    }

    pub fn code(self) -> u16 {
        match self {
            ReportStatus::Delivered => 200,
            ReportStatus::PeerUnavailable => 480,
            ReportStatus::NoSuchWire => 481,
            ReportStatus::Other(code) => code,
        }
    }
}

/// Service-wire verbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Commission,
    Commissioned,
    Decommission,
    Decommissioned,
    Authorize,
    Authorized,
    Denied,
    Ping,
    Pong,
    PeerDown,
    PeerUp,
    Error,
    /// Binds a payload connection to the signaling dialog named by `Call-ID`.
    Attach,
    Attached,
}

impl Verb {
    pub const ALL: [Verb; 14] = [
        Verb::Commission,
        Verb::Commissioned,
        Verb::Decommission,
        Verb::Decommissioned,
        Verb::Authorize,
        Verb::Authorized,
        Verb::Denied,
        Verb::Ping,
        Verb::Pong,
        Verb::PeerDown,
        Verb::PeerUp,
        Verb::Error,
        Verb::Attach,
        Verb::Attached,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Commission => "COMMISSION",
            Verb::Commissioned => "COMMISSIONED",
            Verb::Decommission => "DECOMMISSION",
            Verb::Decommissioned => "DECOMMISSIONED",
            Verb::Authorize => "AUTHORIZE",
            Verb::Authorized => "AUTHORIZED",
            Verb::Denied => "DENIED",
            Verb::Ping => "PING",
            Verb::Pong => "PONG",
            Verb::PeerDown => "PEER-DOWN",
            Verb::PeerUp => "PEER-UP",
            Verb::Error => "ERROR",
            Verb::Attach => "ATTACH",
            Verb::Attached => "ATTACHED",
        }
    }

    pub fn requires_ctid(self) -> bool {
        matches!(
            self,
            Verb::Commission
                | Verb::Commissioned
                | Verb::Decommission
                | Verb::Decommissioned
                | Verb::Authorize
                | Verb::Authorized
                | Verb::Denied
                | Verb::PeerDown
                | Verb::PeerUp
        )
    }

    pub fn requires_wire(self) -> bool {
        matches!(self, Verb::Commissioned | Verb::Authorized)
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verb {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Verb::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| WireError::InvalidField("Verb", s.to_owned()))
    }
}

pub mod param {
    pub const CTID: &str = "Ctid";
    pub const WIRE: &str = "Wire";
    pub const REASON: &str = "Reason";
    pub const TOKEN: &str = "Token";
    pub const CALL_ID: &str = "Call-ID";
}

/// Service-wire message: a verb plus ordered, unique key/value params.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlMessage {
    pub verb: Verb,
    params: Vec<(String, String)>,
}

impl ControlMessage {
    pub fn new(verb: Verb) -> Self {
        ControlMessage {
            verb,
            params: Vec::new(),
        }
    }

    /// Appends a param, replacing the value if the key already exists.
    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.params.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.params.push((key.to_owned(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn params(&self) -> &[(String, String)] {
        &self.params
    }

    pub fn ctid(&self) -> Option<Ctid> {
        self.get(param::CTID).and_then(|v| Ctid::new(v).ok())
    }

    pub fn wire(&self) -> Option<WireId> {
        self.get(param::WIRE).and_then(|v| v.parse().ok())
    }

    pub fn reason(&self) -> Option<&str> {
        self.get(param::REASON)
    }

    pub(crate) fn validate(&self) -> Result<(), WireError> {
        for (key, value) in &self.params {
            if !is_header_key(key) || key == "Verb" {
                return Err(WireError::InvalidField("param key", key.clone()));
            }
            if !is_header_value(value) {
                return Err(WireError::InvalidField("param value", value.clone()));
            }
        }
        if self.verb.requires_ctid() {
            match self.get(param::CTID) {
                Some(v) => {
                    Ctid::new(v)?;
                }
                None => return Err(WireError::MissingParam(self.verb, param::CTID)),
            }
        }
        if self.verb.requires_wire() {
            match self.get(param::WIRE) {
                Some(v) => {
                    let wire: WireId = v.parse()?;
                    if !wire.is_bearer() {
                        return Err(WireError::InvalidField("Wire", v.to_owned()));
                    }
                }
                None => return Err(WireError::MissingParam(self.verb, param::WIRE)),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Invite,
    Ack,
    Bye,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Invite => "INVITE",
            Method::Ack => "ACK",
            Method::Bye => "BYE",
        }
    }
}

impl FromStr for Method {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "INVITE" => Ok(Method::Invite),
            "ACK" => Ok(Method::Ack),
            "BYE" => Ok(Method::Bye),
            other => Err(WireError::InvalidField("Method", other.to_owned())),
        }
    }
}

/// How the gateway reaches the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessType {
    Radio,
    Internet,
}

impl AccessType {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessType::Radio => "radio",
            AccessType::Internet => "internet",
        }
    }
}

impl fmt::Display for AccessType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AccessType {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "radio" => Ok(AccessType::Radio),
            "internet" => Ok(AccessType::Internet),
            other => Err(WireError::InvalidField("Access-Type", other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Security {
    Plain,
    Secure,
}

impl Security {
    pub fn as_str(self) -> &'static str {
        match self {
            Security::Plain => "plain",
            Security::Secure => "secure",
        }
    }
}

impl fmt::Display for Security {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Security {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Security::Plain),
            "secure" => Ok(Security::Secure),
            other => Err(WireError::InvalidField("security", other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Lgw,
    Asgw,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Lgw => "lgw",
            Role::Asgw => "asgw",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lgw" => Ok(Role::Lgw),
            "asgw" => Ok(Role::Asgw),
            other => Err(WireError::InvalidField("role", other.to_owned())),
        }
    }
}

/// Payload-channel parameters carried in INVITE and in the 200 answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionOffer {
    pub security: Security,
    pub max_frame_size: u32,
    pub payload_endpoint: String,
    pub role: Role,
    pub provider: Option<String>,
}

impl SessionOffer {
    pub fn validate(&self) -> Result<(), WireError> {
        let size = self.max_frame_size as usize;
        if !(MIN_FRAME_SIZE..=MAX_FRAME_SIZE).contains(&size) {
            return Err(WireError::InvalidField(
                "max-frame-size",
                self.max_frame_size.to_string(),
            ));
        }
        if !is_header_value(&self.payload_endpoint) || self.payload_endpoint.is_empty() {
            return Err(WireError::InvalidField(
                "payload-endpoint",
                self.payload_endpoint.clone(),
            ));
        }
        match (&self.role, &self.provider) {
            (Role::Asgw, None) => return Err(WireError::MissingProvider),
            (_, Some(p)) if p.is_empty() || !is_header_value(p) => {
                return Err(WireError::InvalidField("provider", p.clone()))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CSeq {
    pub seq: u32,
    pub method: Method,
}

impl fmt::Display for CSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.seq, self.method.as_str())
    }
}

impl FromStr for CSeq {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || WireError::InvalidField("CSeq", s.to_owned());
        let (seq, method) = s.split_once(' ').ok_or_else(bad)?;
        Ok(CSeq {
            seq: parse_decimal(seq).ok_or_else(bad)?,
            method: method.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SignalStart {
    Request(Method),
    Response { status: u16, reason: String },
}

/// Dialog signaling message (INVITE / ACK / BYE and their responses).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalMessage {
    pub start: SignalStart,
    pub from: String,
    pub to: String,
    pub call_id: String,
    pub cseq: CSeq,
    pub access: AccessType,
    pub body: Option<SessionOffer>,
}

impl SignalMessage {
    pub fn method(&self) -> Option<Method> {
        match self.start {
            SignalStart::Request(m) => Some(m),
            SignalStart::Response { .. } => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self.start {
            SignalStart::Response { status, .. } => Some(status),
            SignalStart::Request(_) => None,
        }
    }

    /// Builds a response to `self`, echoing the dialog headers.
    pub fn response(
        &self,
        status: u16,
        reason: &str,
        access: AccessType,
        body: Option<SessionOffer>,
    ) -> SignalMessage {
        SignalMessage {
            start: SignalStart::Response {
                status,
                reason: reason.to_owned(),
            },
            from: self.from.clone(),
            to: self.to.clone(),
            call_id: self.call_id.clone(),
            cseq: self.cseq,
            access,
            body,
        }
    }

    pub(crate) fn validate(&self) -> Result<(), WireError> {
        for (name, value) in [
            ("From", &self.from),
            ("To", &self.to),
            ("Call-ID", &self.call_id),
        ] {
            if value.is_empty() || !is_header_value(value) {
                return Err(WireError::InvalidField(name, value.clone()));
            }
        }
        match &self.start {
            SignalStart::Request(method) => {
                if self.cseq.method != *method {
                    return Err(WireError::InvalidField("CSeq", self.cseq.to_string()));
                }
                match (method, &self.body) {
                    (Method::Invite, None) => return Err(WireError::MissingBody),
                    (Method::Ack | Method::Bye, Some(_)) => return Err(WireError::UnexpectedBody),
                    _ => {}
                }
            }
            SignalStart::Response { status, reason } => {
                if !(100..=699).contains(status) {
                    return Err(WireError::InvalidField("Status", status.to_string()));
                }
                if !is_header_value(reason) {
                    return Err(WireError::InvalidField("Reason", reason.clone()));
                }
                let answers_invite = *status == 200 && self.cseq.method == Method::Invite;
                match (answers_invite, &self.body) {
                    (true, None) => return Err(WireError::MissingBody),
                    (false, Some(_)) => return Err(WireError::UnexpectedBody),
                    _ => {}
                }
            }
        }
        if let Some(body) = &self.body {
            body.validate()?;
        }
        Ok(())
    }
}

/// Anything that travels on an MSBC stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Send(WirePacket),
    Report(DeliveryReport),
    Control(TxnId, ControlMessage),
    Signal(TxnId, SignalMessage),
}

impl Frame {
    pub fn txn(&self) -> &TxnId {
        match self {
            Frame::Send(p) => &p.txn,
            Frame::Report(r) => &r.txn,
            Frame::Control(t, _) | Frame::Signal(t, _) => t,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Frame::Send(_) => "SEND",
            Frame::Report(_) => "REPORT",
            Frame::Control(..) => "CONTROL",
            Frame::Signal(..) => "SIGNAL",
        }
    }
}

pub(crate) fn is_header_key(key: &str) -> bool {
    !key.is_empty()
        && key.len() <= 64
        && key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

/// Header values are printable text without line breaks.
pub(crate) fn is_header_value(value: &str) -> bool {
    value.len() <= 512 && !value.chars().any(|c| c.is_control())
}
