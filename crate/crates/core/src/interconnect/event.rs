use std::fmt;
use std::str::FromStr;

use crate::wire::{Ctid, WireId};

/// Broker-local handle for an attached gateway session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl FromStr for SessionId {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        s.strip_prefix('s')
            .and_then(|n| n.parse().ok())
            .map(SessionId)
            .ok_or(())
    }
}

macro_rules! event_kinds {
    ($($variant:ident => $name:literal, $detail:literal;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum EventKind {
            $($variant,)*
        }

        impl EventKind {
            pub const ALL: &'static [EventKind] = &[$(EventKind::$variant,)*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(EventKind::$variant => $name,)*
                }
            }

            /// Per-packet and keepalive chatter; everything else is lifecycle.
            pub fn is_detail(self) -> bool {
                match self {
                    $(EventKind::$variant => $detail,)*
                }
            }
        }
    };
}

event_kinds! {
    SessionOpened => "session.opened", false;
    SessionClosed => "session.closed", false;
    SessionLost => "session.lost", false;
    SessionSuperseded => "session.superseded", false;
    SessionRefused => "session.refused", false;
    PingSent => "keepalive.ping", true;
    KeepaliveExpired => "keepalive.expired", false;
    WirePending => "wire.pending", false;
    WireActive => "wire.active", false;
    WireDenied => "wire.denied", false;
    WireUnavailable => "wire.unavailable", false;
    WireDuplicate => "wire.duplicate", false;
    WireBuffering => "wire.buffering", false;
    WireRestored => "wire.restored", false;
    WireReleased => "wire.released", false;
    WireFreed => "wire.freed", false;
    PacketForwarded => "packet.forwarded", true;
    PacketBuffered => "packet.buffered", true;
    PacketFlushed => "packet.flushed", true;
    PacketRejected => "packet.rejected", false;
    ReportRelayed => "report.relayed", true;
    ProtocolError => "protocol.error", false;
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        EventKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or(())
    }
}

/// One line of the broker event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub at: u64,
    pub kind: EventKind,
    pub session: Option<SessionId>,
    pub ctid: Option<Ctid>,
    pub wire: Option<WireId>,
}

impl Event {
    pub fn new(at: u64, kind: EventKind) -> Self {
        Event {
            at,
            kind,
            session: None,
            ctid: None,
            wire: None,
        }
    }

    pub fn session(mut self, s: SessionId) -> Self {
        self.session = Some(s);
        self
    }

    pub fn ctid(mut self, c: &Ctid) -> Self {
        self.ctid = Some(c.clone());
        self
    }

    pub fn wire(mut self, w: WireId) -> Self {
        self.wire = Some(w);
        self
    }

    /// The line without its timestamp, for comparing runs.
    pub fn untimed(&self) -> String {
        let line = self.to_string();
        line.split_once(' ')
            .map(|(_, rest)| rest.to_owned())
            .unwrap_or(line)
    }
}

fn field<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "-".to_owned(), T::to_string)
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ts={} kind={} session={} ctid={} wire={}",
            self.at,
            self.kind,
            field(&self.session),
            field(&self.ctid),
            field(&self.wire)
        )
    }
}

impl FromStr for Event {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, String> {
        let mut at = None;
        let mut event = Event::new(0, EventKind::ProtocolError);
        let mut kind = None;
        for part in line.split_whitespace() {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("bad field {part:?}"))?;
            let bad = || format!("bad {key} {value:?}");
            let present = value != "-";
            match key {
                "ts" => at = Some(value.parse().map_err(|_| bad())?),
                "kind" => kind = Some(value.parse().map_err(|_| bad())?),
                "session" if present => event.session = Some(value.parse().map_err(|_| bad())?),
                "ctid" if present => event.ctid = Some(Ctid::new(value).map_err(|_| bad())?),
                "wire" if present => event.wire = Some(value.parse().map_err(|_| bad())?),
                "session" | "ctid" | "wire" => {}
                _ => return Err(format!("unknown field {key:?}")),
            }
        }
        event.at = at.ok_or("missing ts")?;
        event.kind = kind.ok_or("missing kind")?;
        Ok(event)
    }
}
