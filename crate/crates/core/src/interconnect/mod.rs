//! The broker's routing core.
//!
//! [`Interconnect`] owns the session registry, the wire table and the
//! provider buffers. It is driven by three inputs (frames from attached
//! sessions, session loss, and clock ticks) and answers each with an ordered
//! list of [`Action`]s. All timestamps are passed in.
//!
//! Wire ids are allocated per session, lowest free id first. A wire id that
//! was exposed to a gateway is quarantined when its binding is released and
//! only becomes reusable after that gateway acknowledges with
//! `DECOMMISSIONED`, or after the session is gone.

mod config;
mod event;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use bytes::Bytes;

pub use config::{BrokerConfig, ConfigError};
pub use event::{Event, EventKind, SessionId};

use crate::directory::SubscriptionDirectory;
use crate::session::{keepalive_due, Keepalive, Session};
use crate::wire::{
    param, ControlMessage, Ctid, DeliveryReport, Frame, ReportStatus, Role, TxnGenerator, TxnId,
    Verb, WireId, WirePacket,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub keepalive_interval_ms: u64,
    pub keepalive_misses: u32,
    pub buffer_max_packets: usize,
    pub buffer_max_bytes: usize,
}

impl From<&BrokerConfig> for Limits {
    fn from(c: &BrokerConfig) -> Self {
        Limits {
            keepalive_interval_ms: c.keepalive_interval_ms,
            keepalive_misses: c.keepalive_misses,
            buffer_max_packets: c.buffer_max_packets,
            buffer_max_bytes: c.buffer_max_bytes,
        }
    }
}

impl Default for Limits {
    fn default() -> Self {
        Limits::from(&BrokerConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(SessionId, Frame),
    /// Drop the session's transport.
    Close(SessionId),
    Log(Event),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WireState {
    Pending,
    Active,
    Buffering,
    Released,
}

/// Why a session left the registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCause {
    /// BYE on the signaling channel.
    Closed,
    /// Transport closed or failed.
    TransportLost,
    /// Keepalive expiry.
    Expired,
    /// The same subscriber opened a new session.
    Superseded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AuthPurpose {
    Commission,
    Restore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PendingAuth {
    session: SessionId,
    wire: WireId,
    purpose: AuthPurpose,
}

#[derive(Debug, Clone)]
struct Buffered {
    src_txn: TxnId,
    src_seq: u64,
    payload: Bytes,
}

#[derive(Debug, Clone)]
pub struct WireTableEntry {
    pub ctid: Ctid,
    pub provider: String,
    pub lgw_session: SessionId,
    pub lgw_wire: WireId,
    pub asgw_session: Option<SessionId>,
    pub asgw_wire: Option<WireId>,
    pub state: WireState,
    buffer: VecDeque<Buffered>,
    buffer_bytes: usize,
    to_lgw_seq: u64,
    to_asgw_seq: u64,
    auth: Option<PendingAuth>,
    awaiting_ack: Vec<(SessionId, WireId)>,
}

impl WireTableEntry {
    pub fn buffered_packets(&self) -> usize {
        self.buffer.len()
    }

    pub fn buffered_bytes(&self) -> usize {
        self.buffer_bytes
    }

    /// Wire ids waiting for a teardown acknowledgment.
    pub fn awaiting_ack(&self) -> &[(SessionId, WireId)] {
        &self.awaiting_ack
    }
}

/// A forwarded packet whose end-to-end report has not come back yet.
#[derive(Debug, Clone)]
struct Relay {
    entry: EntryId,
    src: SessionId,
    src_txn: TxnId,
    src_wire: WireId,
    src_seq: u64,
    order: u64,
    /// Kept for packets headed to an ASGW so they can be requeued.
    requeue: Option<Bytes>,
}

#[derive(Debug, Clone)]
struct Attached {
    session: Session,
    last_ping: Option<u64>,
    used: BTreeSet<u32>,
    pings: u64,
}

/// Result of the directory-based admission check at INVITE time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Refusal {
    pub status: u16,
    pub reason: String,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
struct BufferTotals {
    packets: usize,
    bytes: usize,
}

#[derive(Debug, Clone)]
pub struct Interconnect {
    limits: Limits,
    directory: SubscriptionDirectory,
    sessions: BTreeMap<SessionId, Attached>,
    asgw_by_provider: HashMap<String, SessionId>,
    entries: BTreeMap<EntryId, WireTableEntry>,
    by_ctid: HashMap<Ctid, EntryId>,
    bindings: HashMap<(SessionId, WireId), EntryId>,
    relays: HashMap<(SessionId, TxnId), Relay>,
    buffers: HashMap<String, BufferTotals>,
    txns: TxnGenerator,
    next_entry: u64,
    next_order: u64,
}

fn control(verb: Verb, ctid: Option<&Ctid>) -> ControlMessage {
    let mut msg = ControlMessage::new(verb);
    if let Some(c) = ctid {
        msg.set(param::CTID, c);
    }
    msg
}

impl Interconnect {
    pub fn new(limits: Limits, directory: SubscriptionDirectory) -> Self {
        Interconnect {
            limits,
            directory,
            sessions: BTreeMap::new(),
            asgw_by_provider: HashMap::new(),
            entries: BTreeMap::new(),
            by_ctid: HashMap::new(),
            bindings: HashMap::new(),
            relays: HashMap::new(),
            buffers: HashMap::new(),
            txns: TxnGenerator::new(),
            next_entry: 1,
            next_order: 0,
        }
    }

    pub fn limits(&self) -> Limits {
        self.limits
    }

    pub fn directory(&self) -> &SubscriptionDirectory {
        &self.directory
    }

    /// Replaces the directory. Existing wires are kept.
    pub fn set_directory(&mut self, directory: SubscriptionDirectory) {
        self.directory = directory;
    }

    /// An ASGW must match a provider record; an LGW must not claim a
    /// provider's subscriber identity.
    pub fn admit(
        &self,
        role: Role,
        subscriber: &str,
        provider: Option<&str>,
    ) -> Result<(), Refusal> {
        let refuse = |reason: &str| {
            Err(Refusal {
                status: 403,
                reason: reason.to_owned(),
            })
        };
        match role {
            Role::Asgw => match provider.and_then(|p| self.directory.provider(p)) {
                None => refuse("unknown provider"),
                Some(rec) if rec.subscriber != subscriber => refuse("subscriber mismatch"),
                Some(_) => Ok(()),
            },
            Role::Lgw => match self.directory.provider_for_subscriber(subscriber) {
                Some(_) => refuse("provider identity"),
                None => Ok(()),
            },
        }
    }

    pub fn session(&self, id: SessionId) -> Option<&Session> {
        self.sessions.get(&id).map(|a| &a.session)
    }

    pub fn session_ids(&self) -> impl Iterator<Item = SessionId> + '_ {
        self.sessions.keys().copied()
    }

    pub fn provider_session(&self, provider: &str) -> Option<SessionId> {
        self.asgw_by_provider.get(provider).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (EntryId, &WireTableEntry)> {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    /// The non-released entry for a CTID.
    pub fn entry_for(&self, ctid: &Ctid) -> Option<&WireTableEntry> {
        self.by_ctid.get(ctid).map(|id| &self.entries[id])
    }

    pub fn buffered(&self, provider: &str) -> (usize, usize) {
        self.buffers
            .get(provider)
            .map_or((0, 0), |t| (t.packets, t.bytes))
    }

    pub fn in_flight(&self) -> usize {
        self.relays.len()
    }

    pub fn quarantined(&self) -> usize {
        self.entries.values().map(|e| e.awaiting_ack.len()).sum()
    }

    /// Where a packet from `(src, wire)` would go right now.
    pub fn route_target(&self, src: SessionId, wire: WireId) -> Option<(SessionId, WireId)> {
        let entry = &self.entries[self.bindings.get(&(src, wire))?];
        if entry.state != WireState::Active {
            return None;
        }
        if entry.lgw_session == src && entry.lgw_wire == wire {
            Some((entry.asgw_session?, entry.asgw_wire?))
        } else if entry.asgw_session == Some(src) && entry.asgw_wire == Some(wire) {
            Some((entry.lgw_session, entry.lgw_wire))
        } else {
            None
        }
    }

    fn log(&self, out: &mut Vec<Action>, event: Event) {
        out.push(Action::Log(event));
    }

    fn send_control(&mut self, out: &mut Vec<Action>, to: SessionId, msg: ControlMessage) {
        let txn = self.txns.next_txn();
        out.push(Action::Send(to, Frame::Control(txn, msg)));
    }

    fn report(
        &self,
        out: &mut Vec<Action>,
        to: SessionId,
        txn: TxnId,
        wire: WireId,
        seq: u64,
        status: ReportStatus,
    ) {
        out.push(Action::Send(
            to,
            Frame::Report(DeliveryReport {
                txn,
                wire,
                seq,
                status,
            }),
        ));
    }

    fn alloc_wire(&mut self, session: SessionId, entry: EntryId) -> WireId {
        let used = &mut self.sessions.get_mut(&session).expect("live session").used;
        let mut candidate = 1u32;
        for &w in used.iter() {
            if w != candidate {
                break;
            }
            candidate += 1;
        }
        used.insert(candidate);
        let wire = WireId(candidate);
        self.bindings.insert((session, wire), entry);
        wire
    }

    fn free_wire(&mut self, session: SessionId, wire: WireId) {
        self.bindings.remove(&(session, wire));
        if let Some(a) = self.sessions.get_mut(&session) {
            a.used.remove(&wire.0);
        }
    }

    fn maybe_remove(&mut self, id: EntryId) {
        let gone = self.entries.get(&id).is_some_and(|e| {
            e.state == WireState::Released && e.awaiting_ack.is_empty() && e.auth.is_none()
        });
        if gone {
            self.entries.remove(&id);
        }
    }

    fn release_buffer(&mut self, id: EntryId) -> Vec<Buffered> {
        let entry = self.entries.get_mut(&id).expect("entry");
        let drained: Vec<Buffered> = entry.buffer.drain(..).collect();
        let bytes = std::mem::take(&mut entry.buffer_bytes);
        let totals = self.buffers.entry(entry.provider.clone()).or_default();
        totals.packets -= drained.len();
        totals.bytes -= bytes;
        drained
    }

    fn try_buffer(&mut self, id: EntryId, item: Buffered) -> Result<(), Buffered> {
        let limits = self.limits;
        let entry = self.entries.get_mut(&id).expect("entry");
        let totals = self.buffers.entry(entry.provider.clone()).or_default();
        let len = item.payload.len();
        if totals.packets + 1 > limits.buffer_max_packets
            || totals.bytes + len > limits.buffer_max_bytes
        {
            return Err(item);
        }
        totals.packets += 1;
        totals.bytes += len;
        entry.buffer_bytes += len;
        entry.buffer.push_back(item);
        Ok(())
    }

    /// Registers an established session whose payload channel is attached.
    pub fn open_session(&mut self, id: SessionId, session: Session, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let previous = self
            .sessions
            .iter()
            .find(|(_, a)| a.session.subscriber == session.subscriber)
            .map(|(id, _)| *id);
        if let Some(old) = previous {
            out.extend(self.lose(old, now, LossCause::Superseded));
        }
        let role = session.role;
        let provider = session.provider.clone();
        self.sessions.insert(
            id,
            Attached {
                session,
                last_ping: None,
                used: BTreeSet::new(),
                pings: 0,
            },
        );
        self.sessions.get_mut(&id).unwrap().session.touch(now);
        self.log(
            &mut out,
            Event::new(now, EventKind::SessionOpened).session(id),
        );
        if let (Role::Asgw, Some(provider)) = (role, provider) {
            self.asgw_by_provider.insert(provider.clone(), id);
            self.restore_provider(id, &provider, now, &mut out);
        }
        out
    }

    /// Re-authorizes every buffering wire of `provider` on its new session.
    fn restore_provider(
        &mut self,
        asgw: SessionId,
        provider: &str,
        now: u64,
        out: &mut Vec<Action>,
    ) {
        let waiting: Vec<EntryId> = self
            .entries
            .iter()
            .filter(|(_, e)| {
                e.state == WireState::Buffering && e.provider == provider && e.auth.is_none()
            })
            .map(|(id, _)| *id)
            .collect();
        for id in waiting {
            let wire = self.alloc_wire(asgw, id);
            let entry = self.entries.get_mut(&id).unwrap();
            entry.auth = Some(PendingAuth {
                session: asgw,
                wire,
                purpose: AuthPurpose::Restore,
            });
            let ctid = entry.ctid.clone();
            let msg = control(Verb::Authorize, Some(&ctid)).with(param::WIRE, wire);
            self.send_control(out, asgw, msg);
            self.log(
                out,
                Event::new(now, EventKind::WirePending)
                    .session(asgw)
                    .ctid(&ctid)
                    .wire(wire),
            );
        }
    }

    /// Any frame received on a session's payload channel.
    pub fn on_frame(&mut self, id: SessionId, frame: Frame, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let Some(attached) = self.sessions.get_mut(&id) else {
            return out;
        };
        attached.session.touch(now);
        match frame {
            Frame::Send(pkt) => self.route_packet(id, pkt, now, &mut out),
            Frame::Report(r) => self.relay_report(id, r, now, &mut out),
            Frame::Control(_, msg) => self.on_control(id, msg, now, &mut out),
            Frame::Signal(..) => self.log(
                &mut out,
                Event::new(now, EventKind::ProtocolError).session(id),
            ),
        }
        out
    }

    fn route_packet(&mut self, src: SessionId, pkt: WirePacket, now: u64, out: &mut Vec<Action>) {
        let reject = |this: &Self, out: &mut Vec<Action>, status, ctid: Option<&Ctid>| {
            let mut ev = Event::new(now, EventKind::PacketRejected)
                .session(src)
                .wire(pkt.wire);
            if let Some(c) = ctid {
                ev = ev.ctid(c);
            }
            this.log(out, ev);
            this.report(out, src, pkt.txn.clone(), pkt.wire, pkt.seq, status);
        };
        let Some(&id) = self.bindings.get(&(src, pkt.wire)) else {
            reject(self, out, ReportStatus::NoSuchWire, None);
            return;
        };
        let entry = &self.entries[&id];
        let ctid = entry.ctid.clone();
        let from_lgw = entry.lgw_session == src && entry.lgw_wire == pkt.wire;
        let from_asgw = entry.asgw_session == Some(src) && entry.asgw_wire == Some(pkt.wire);
        match entry.state {
            WireState::Active if from_lgw || from_asgw => {
                let dest = if from_lgw {
                    entry.asgw_session.unwrap()
                } else {
                    entry.lgw_session
                };
                let fits = self.sessions[&dest]
                    .session
                    .negotiated
                    .as_ref()
                    .is_none_or(|n| pkt.payload.len() <= n.max_frame_size as usize);
                if !fits {
                    reject(self, out, ReportStatus::PeerUnavailable, Some(&ctid));
                    return;
                }
                self.forward(
                    id,
                    src,
                    pkt.txn,
                    pkt.wire,
                    pkt.seq,
                    pkt.payload,
                    from_lgw,
                    EventKind::PacketForwarded,
                    now,
                    out,
                );
            }
            WireState::Buffering if from_lgw => {
                let item = Buffered {
                    src_txn: pkt.txn.clone(),
                    src_seq: pkt.seq,
                    payload: pkt.payload.clone(),
                };
                match self.try_buffer(id, item) {
                    Ok(()) => self.log(
                        out,
                        Event::new(now, EventKind::PacketBuffered)
                            .session(src)
                            .ctid(&ctid)
                            .wire(pkt.wire),
                    ),
                    Err(_) => reject(self, out, ReportStatus::PeerUnavailable, Some(&ctid)),
                }
            }
            WireState::Released if entry.awaiting_ack.contains(&(src, pkt.wire)) => {
                reject(self, out, ReportStatus::PeerUnavailable, Some(&ctid))
            }
            _ => reject(self, out, ReportStatus::NoSuchWire, None),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &mut self,
        id: EntryId,
        src: SessionId,
        src_txn: TxnId,
        src_wire: WireId,
        src_seq: u64,
        payload: Bytes,
        to_asgw: bool,
        kind: EventKind,
        now: u64,
        out: &mut Vec<Action>,
    ) {
        let entry = self.entries.get_mut(&id).unwrap();
        let (dest, wire, seq) = if to_asgw {
            entry.to_asgw_seq += 1;
            (
                entry.asgw_session.unwrap(),
                entry.asgw_wire.unwrap(),
                entry.to_asgw_seq,
            )
        } else {
            entry.to_lgw_seq += 1;
            (entry.lgw_session, entry.lgw_wire, entry.to_lgw_seq)
        };
        let ctid = entry.ctid.clone();
        let txn = self.txns.next_txn();
        self.next_order += 1;
        self.relays.insert(
            (dest, txn.clone()),
            Relay {
                entry: id,
                src,
                src_txn,
                src_wire,
                src_seq,
                order: self.next_order,
                requeue: to_asgw.then(|| payload.clone()),
            },
        );
        out.push(Action::Send(
            dest,
            Frame::Send(WirePacket {
                txn,
                wire,
                seq,
                payload,
            }),
        ));
        self.log(
            out,
            Event::new(now, kind).session(dest).ctid(&ctid).wire(wire),
        );
    }

    fn relay_report(
        &mut self,
        from: SessionId,
        r: DeliveryReport,
        now: u64,
        out: &mut Vec<Action>,
    ) {
        let Some(relay) = self.relays.remove(&(from, r.txn.clone())) else {
            return;
        };
        if !self.sessions.contains_key(&relay.src) {
            return;
        }
        let mut ev = Event::new(now, EventKind::ReportRelayed)
            .session(relay.src)
            .wire(relay.src_wire);
        if let Some(e) = self.entries.get(&relay.entry) {
            ev = ev.ctid(&e.ctid);
        }
        self.log(out, ev);
        self.report(
            out,
            relay.src,
            relay.src_txn,
            relay.src_wire,
            relay.src_seq,
            r.status,
        );
    }

    fn on_control(&mut self, id: SessionId, msg: ControlMessage, now: u64, out: &mut Vec<Action>) {
        let role = self.sessions[&id].session.role;
        match (msg.verb, role) {
            (Verb::Ping, _) => {
                let mut pong = ControlMessage::new(Verb::Pong);
                if let Some(token) = msg.get(param::TOKEN) {
                    pong.set(param::TOKEN, token);
                }
                self.send_control(out, id, pong);
            }
            (Verb::Pong, _) => {}
            (Verb::Commission, Role::Lgw) => {
                if let Some(ctid) = msg.ctid() {
                    self.commission(id, ctid, now, out);
                }
            }
            (Verb::Authorized, Role::Asgw) => self.auth_result(id, &msg, true, now, out),
            (Verb::Denied, Role::Asgw) => self.auth_result(id, &msg, false, now, out),
            (Verb::Decommission, _) => {
                if let Some(ctid) = msg.ctid() {
                    self.decommission(id, ctid, now, out);
                }
            }
            (Verb::Decommissioned, _) => self.teardown_ack(id, &msg, now, out),
            _ => {
                let mut err = control(Verb::Error, msg.ctid().as_ref());
                err.set(param::REASON, "unexpected-verb");
                self.send_control(out, id, err);
                self.log(out, Event::new(now, EventKind::ProtocolError).session(id));
            }
        }
    }

    fn commission(&mut self, lgw: SessionId, ctid: Ctid, now: u64, out: &mut Vec<Action>) {
        let refuse = |this: &mut Self, out: &mut Vec<Action>, verb, reason: &str, kind| {
            let msg = control(verb, Some(&ctid)).with(param::REASON, reason);
            this.send_control(out, lgw, msg);
            this.log(out, Event::new(now, kind).session(lgw).ctid(&ctid));
        };
        if self.by_ctid.contains_key(&ctid) {
            return refuse(
                self,
                out,
                Verb::Error,
                "duplicate",
                EventKind::WireDuplicate,
            );
        }
        let provider = match self.directory.lookup_provider(&ctid) {
            Ok(p) => p.to_owned(),
            Err(_) => {
                return refuse(
                    self,
                    out,
                    Verb::Denied,
                    "no-provider",
                    EventKind::WireDenied,
                )
            }
        };
        let Some(&asgw) = self.asgw_by_provider.get(&provider) else {
            return refuse(
                self,
                out,
                Verb::Error,
                "provider-unavailable",
                EventKind::WireUnavailable,
            );
        };
        let id = EntryId(self.next_entry);
        self.next_entry += 1;
        let lgw_wire = self.alloc_wire(lgw, id);
        let asgw_wire = self.alloc_wire(asgw, id);
        self.entries.insert(
            id,
            WireTableEntry {
                ctid: ctid.clone(),
                provider,
                lgw_session: lgw,
                lgw_wire,
                asgw_session: Some(asgw),
                asgw_wire: Some(asgw_wire),
                state: WireState::Pending,
                buffer: VecDeque::new(),
                buffer_bytes: 0,
                to_lgw_seq: 0,
                to_asgw_seq: 0,
                auth: Some(PendingAuth {
                    session: asgw,
                    wire: asgw_wire,
                    purpose: AuthPurpose::Commission,
                }),
                awaiting_ack: Vec::new(),
            },
        );
        self.by_ctid.insert(ctid.clone(), id);
        let msg = control(Verb::Authorize, Some(&ctid)).with(param::WIRE, asgw_wire);
        self.send_control(out, asgw, msg);
        self.log(
            out,
            Event::new(now, EventKind::WirePending)
                .session(lgw)
                .ctid(&ctid)
                .wire(lgw_wire),
        );
    }

    fn auth_result(
        &mut self,
        asgw: SessionId,
        msg: &ControlMessage,
        allowed: bool,
        now: u64,
        out: &mut Vec<Action>,
    ) {
        let (Some(ctid), Some(wire)) = (msg.ctid(), msg.wire()) else {
            self.log(out, Event::new(now, EventKind::ProtocolError).session(asgw));
            return;
        };
        let Some(&id) = self.bindings.get(&(asgw, wire)) else {
            return;
        };
        let entry = self.entries.get_mut(&id).unwrap();
        let expected = PendingAuth {
            session: asgw,
            wire,
            purpose: match entry.auth {
                Some(a) => a.purpose,
                None => return,
            },
        };
        if entry.auth != Some(expected) || entry.ctid != ctid {
            return;
        }
        entry.auth = None;
        let lgw = entry.lgw_session;
        let lgw_wire = entry.lgw_wire;
        match (expected.purpose, entry.state, allowed) {
            (AuthPurpose::Commission, WireState::Pending, true) => {
                entry.state = WireState::Active;
                let to_lgw = control(Verb::Commissioned, Some(&ctid)).with(param::WIRE, lgw_wire);
                let to_asgw = control(Verb::Commissioned, Some(&ctid)).with(param::WIRE, wire);
                self.send_control(out, lgw, to_lgw);
                self.send_control(out, asgw, to_asgw);
                self.log(
                    out,
                    Event::new(now, EventKind::WireActive)
                        .session(lgw)
                        .ctid(&ctid)
                        .wire(lgw_wire),
                );
            }
            (AuthPurpose::Commission, WireState::Pending, false) => {
                entry.state = WireState::Released;
                self.by_ctid.remove(&ctid);
                self.free_wire(lgw, lgw_wire);
                self.free_wire(asgw, wire);
                self.send_control(out, lgw, control(Verb::Denied, Some(&ctid)));
                self.log(
                    out,
                    Event::new(now, EventKind::WireDenied)
                        .session(lgw)
                        .ctid(&ctid),
                );
                self.maybe_remove(id);
            }
            (AuthPurpose::Restore, WireState::Buffering, true) => {
                entry.state = WireState::Active;
                entry.asgw_session = Some(asgw);
                entry.asgw_wire = Some(wire);
                entry.to_asgw_seq = 0;
                let up = control(Verb::PeerUp, Some(&ctid)).with(param::WIRE, wire);
                self.send_control(out, asgw, up);
                self.log(
                    out,
                    Event::new(now, EventKind::WireRestored)
                        .session(asgw)
                        .ctid(&ctid)
                        .wire(wire),
                );
                for item in self.release_buffer(id) {
                    self.forward(
                        id,
                        lgw,
                        item.src_txn,
                        lgw_wire,
                        item.src_seq,
                        item.payload,
                        true,
                        EventKind::PacketFlushed,
                        now,
                        out,
                    );
                }
            }
            (AuthPurpose::Restore, WireState::Buffering, false) => {
                self.free_wire(asgw, wire);
                self.release_with_peer_down(id, now, out);
            }
            (_, WireState::Released, true) => {
                // The LGW went away while authorization was in flight.
                entry.awaiting_ack.push((asgw, wire));
                let msg = control(Verb::Decommissioned, Some(&ctid)).with(param::WIRE, wire);
                self.send_control(out, asgw, msg);
            }
            (_, WireState::Released, false) => {
                self.free_wire(asgw, wire);
                self.maybe_remove(id);
            }
            _ => {}
        }
    }

    /// Buffering entry refused by its provider: drop the buffer, tell the LGW.
    fn release_with_peer_down(&mut self, id: EntryId, now: u64, out: &mut Vec<Action>) {
        let dropped = self.release_buffer(id);
        let entry = self.entries.get_mut(&id).unwrap();
        entry.state = WireState::Released;
        let (ctid, lgw, lgw_wire) = (entry.ctid.clone(), entry.lgw_session, entry.lgw_wire);
        entry.awaiting_ack.push((lgw, lgw_wire));
        self.by_ctid.remove(&ctid);
        for item in dropped {
            self.report(
                out,
                lgw,
                item.src_txn,
                lgw_wire,
                item.src_seq,
                ReportStatus::PeerUnavailable,
            );
        }
        let msg = control(Verb::PeerDown, Some(&ctid)).with(param::WIRE, lgw_wire);
        self.send_control(out, lgw, msg);
        self.log(
            out,
            Event::new(now, EventKind::WireReleased)
                .session(lgw)
                .ctid(&ctid)
                .wire(lgw_wire),
        );
    }

    fn decommission(&mut self, from: SessionId, ctid: Ctid, now: u64, out: &mut Vec<Action>) {
        let owned = self.by_ctid.get(&ctid).copied().filter(|id| {
            let e = &self.entries[id];
            e.lgw_session == from || (e.asgw_session == Some(from) && e.state == WireState::Active)
        });
        let Some(id) = owned else {
            let msg = control(Verb::Error, Some(&ctid)).with(param::REASON, "unknown-ctid");
            self.send_control(out, from, msg);
            return;
        };
        let state = self.entries[&id].state;
        match state {
            WireState::Pending => {
                let msg = control(Verb::Error, Some(&ctid)).with(param::REASON, "pending");
                self.send_control(out, from, msg);
            }
            WireState::Active | WireState::Buffering => {
                let dropped = self.release_buffer(id);
                let entry = self.entries.get_mut(&id).unwrap();
                entry.state = WireState::Released;
                let lgw = (entry.lgw_session, entry.lgw_wire);
                let asgw = entry.asgw_session.zip(entry.asgw_wire);
                entry.awaiting_ack.push(lgw);
                entry.awaiting_ack.extend(asgw);
                self.by_ctid.remove(&ctid);
                for item in dropped {
                    self.report(
                        out,
                        lgw.0,
                        item.src_txn,
                        lgw.1,
                        item.src_seq,
                        ReportStatus::PeerUnavailable,
                    );
                }
                for (session, wire) in std::iter::once(lgw).chain(asgw) {
                    let msg = control(Verb::Decommissioned, Some(&ctid)).with(param::WIRE, wire);
                    self.send_control(out, session, msg);
                }
                self.log(
                    out,
                    Event::new(now, EventKind::WireReleased)
                        .session(from)
                        .ctid(&ctid)
                        .wire(lgw.1),
                );
            }
            WireState::Released => {}
        }
    }

    fn teardown_ack(
        &mut self,
        from: SessionId,
        msg: &ControlMessage,
        now: u64,
        out: &mut Vec<Action>,
    ) {
        let Some(wire) = msg.wire() else { return };
        let Some(&id) = self.bindings.get(&(from, wire)) else {
            return;
        };
        let entry = self.entries.get_mut(&id).unwrap();
        let before = entry.awaiting_ack.len();
        entry.awaiting_ack.retain(|&k| k != (from, wire));
        if entry.awaiting_ack.len() == before {
            return;
        }
        let ctid = entry.ctid.clone();
        self.free_wire(from, wire);
        self.log(
            out,
            Event::new(now, EventKind::WireFreed)
                .session(from)
                .ctid(&ctid)
                .wire(wire),
        );
        self.maybe_remove(id);
    }

    /// BYE, transport failure, keepalive expiry or supersession.
    pub fn close_session(&mut self, id: SessionId, now: u64, cause: LossCause) -> Vec<Action> {
        if !self.sessions.contains_key(&id) {
            return Vec::new();
        }
        self.lose(id, now, cause)
    }

    fn lose(&mut self, id: SessionId, now: u64, cause: LossCause) -> Vec<Action> {
        let mut out = Vec::new();
        let attached = self.sessions.remove(&id).expect("live session");
        let kind = match cause {
            LossCause::Closed => EventKind::SessionClosed,
            LossCause::TransportLost | LossCause::Expired => EventKind::SessionLost,
            LossCause::Superseded => EventKind::SessionSuperseded,
        };
        self.log(&mut out, Event::new(now, kind).session(id));
        if let Some(p) = &attached.session.provider {
            if self.asgw_by_provider.get(p) == Some(&id) {
                self.asgw_by_provider.remove(p);
            }
        }

        // Unreported packets headed to the lost session.
        let mut requeue: Vec<Relay> = Vec::new();
        let mut refused: Vec<Relay> = Vec::new();
        let keys: Vec<_> = self
            .relays
            .keys()
            .filter(|(d, _)| *d == id)
            .cloned()
            .collect();
        for key in keys {
            let relay = self.relays.remove(&key).unwrap();
            if relay.requeue.is_some() {
                requeue.push(relay);
            } else {
                refused.push(relay);
            }
        }
        self.relays.retain(|_, r| r.src != id);
        refused.sort_by_key(|r| r.order);
        for r in refused {
            if self.sessions.contains_key(&r.src) {
                self.report(
                    &mut out,
                    r.src,
                    r.src_txn,
                    r.src_wire,
                    r.src_seq,
                    ReportStatus::PeerUnavailable,
                );
            }
        }

        let touched: Vec<EntryId> = self
            .entries
            .iter()
            .filter(|(_, e)| {
                e.lgw_session == id
                    || e.asgw_session == Some(id)
                    || e.auth.is_some_and(|a| a.session == id)
                    || e.awaiting_ack.iter().any(|(s, _)| *s == id)
            })
            .map(|(k, _)| *k)
            .collect();
        for eid in touched {
            let entry = self.entries.get_mut(&eid).unwrap();
            entry.awaiting_ack.retain(|(s, _)| *s != id);
            let ctid = entry.ctid.clone();
            if entry.lgw_session == id {
                let prior = entry.state;
                entry.state = WireState::Released;
                if prior == WireState::Active {
                    let (asgw, wire) = (entry.asgw_session.unwrap(), entry.asgw_wire.unwrap());
                    entry.awaiting_ack.push((asgw, wire));
                    let msg = control(Verb::PeerDown, Some(&ctid)).with(param::WIRE, wire);
                    self.send_control(&mut out, asgw, msg);
                }
                if prior != WireState::Released {
                    self.by_ctid.remove(&ctid);
                    self.release_buffer(eid);
                    self.log(
                        &mut out,
                        Event::new(now, EventKind::WireReleased)
                            .session(id)
                            .ctid(&ctid),
                    );
                }
            } else if entry.state == WireState::Active && entry.asgw_session == Some(id) {
                entry.state = WireState::Buffering;
                let wire = entry.asgw_wire.take().unwrap();
                entry.asgw_session = None;
                self.log(
                    &mut out,
                    Event::new(now, EventKind::WireBuffering)
                        .session(id)
                        .ctid(&ctid)
                        .wire(wire),
                );
            } else if entry.state == WireState::Pending
                && entry.auth.is_some_and(|a| a.session == id)
            {
                entry.state = WireState::Released;
                entry.auth = None;
                let (lgw, lgw_wire) = (entry.lgw_session, entry.lgw_wire);
                self.by_ctid.remove(&ctid);
                self.free_wire(lgw, lgw_wire);
                let msg =
                    control(Verb::Error, Some(&ctid)).with(param::REASON, "provider-unavailable");
                self.send_control(&mut out, lgw, msg);
                self.log(
                    &mut out,
                    Event::new(now, EventKind::WireUnavailable)
                        .session(lgw)
                        .ctid(&ctid),
                );
            }
            let entry = self.entries.get_mut(&eid).unwrap();
            if entry.auth.is_some_and(|a| a.session == id) {
                entry.auth = None;
            }
            self.maybe_remove(eid);
        }

        requeue.sort_by_key(|r| r.order);
        for r in requeue {
            let buffering = self
                .entries
                .get(&r.entry)
                .is_some_and(|e| e.state == WireState::Buffering);
            let item = Buffered {
                src_txn: r.src_txn.clone(),
                src_seq: r.src_seq,
                payload: r.requeue.clone().unwrap(),
            };
            if (!buffering || self.try_buffer(r.entry, item).is_err())
                && self.sessions.contains_key(&r.src)
            {
                self.report(
                    &mut out,
                    r.src,
                    r.src_txn,
                    r.src_wire,
                    r.src_seq,
                    ReportStatus::PeerUnavailable,
                );
            }
        }

        self.bindings.retain(|(s, _), _| *s != id);
        out.push(Action::Close(id));
        out
    }

    /// Keepalive pass over every session.
    pub fn tick(&mut self, now: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let Limits {
            keepalive_interval_ms: interval,
            keepalive_misses: misses,
            ..
        } = self.limits;
        let mut expired = Vec::new();
        let mut pings = Vec::new();
        for (id, a) in self.sessions.iter_mut() {
            match keepalive_due(&a.session, now, interval, misses) {
                Keepalive::Expired => expired.push(*id),
                Keepalive::SendPing
                    if a.last_ping
                        .is_none_or(|p| now.saturating_sub(p) >= interval) =>
                {
                    a.last_ping = Some(now);
                    a.pings += 1;
                    pings.push((*id, a.pings));
                }
                _ => {}
            }
        }
        for (id, n) in pings {
            let msg = ControlMessage::new(Verb::Ping).with(param::TOKEN, format!("k{n}"));
            self.send_control(&mut out, id, msg);
            self.log(&mut out, Event::new(now, EventKind::PingSent).session(id));
        }
        for id in expired {
            self.log(
                &mut out,
                Event::new(now, EventKind::KeepaliveExpired).session(id),
            );
            out.extend(self.lose(id, now, LossCause::Expired));
        }
        out
    }

    /// Structural invariants of the table; used by the property tests.
    #[doc(hidden)]
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut live = HashMap::new();
        for (ctid, id) in &self.by_ctid {
            let e = self
                .entries
                .get(id)
                .ok_or("by_ctid points at a missing entry")?;
            if e.state == WireState::Released || &e.ctid != ctid {
                return Err(format!("stale ctid index for {ctid}"));
            }
            live.insert(ctid.clone(), *id);
        }
        let mut totals: HashMap<&str, BufferTotals> = HashMap::new();
        for (id, e) in &self.entries {
            if e.state != WireState::Released && live.get(&e.ctid) != Some(id) {
                return Err(format!("non-released entry {} missing from index", e.ctid));
            }
            let lgw_live = self.sessions.contains_key(&e.lgw_session);
            let asgw_live = e
                .asgw_session
                .is_some_and(|s| self.sessions.contains_key(&s));
            match e.state {
                WireState::Active if !(lgw_live && asgw_live) => {
                    return Err(format!("active entry {} without live sessions", e.ctid))
                }
                WireState::Buffering if e.asgw_session.is_some() => {
                    return Err(format!("buffering entry {} has an asgw", e.ctid))
                }
                _ => {}
            }
            if e.state != WireState::Buffering && !e.buffer.is_empty() {
                return Err(format!(
                    "entry {} holds a buffer while {:?}",
                    e.ctid, e.state
                ));
            }
            if e.buffer.iter().map(|b| b.payload.len()).sum::<usize>() != e.buffer_bytes {
                return Err(format!("byte count drift on {}", e.ctid));
            }
            let t = totals.entry(&e.provider).or_default();
            t.packets += e.buffer.len();
            t.bytes += e.buffer_bytes;
        }
        for (provider, t) in &totals {
            if *t != self.buffers.get(*provider).copied().unwrap_or_default() {
                return Err(format!("buffer totals drift for {provider}"));
            }
            if t.packets > self.limits.buffer_max_packets || t.bytes > self.limits.buffer_max_bytes
            {
                return Err(format!("buffer cap exceeded for {provider}"));
            }
        }
        for ((session, wire), id) in &self.bindings {
            let used = self
                .sessions
                .get(session)
                .ok_or_else(|| format!("binding on dead session {session}"))?;
            if !used.used.contains(&wire.0) {
                return Err(format!("binding {session}/{wire} not marked used"));
            }
            let e = self.entries.get(id).ok_or("binding to missing entry")?;
            let referenced = (e.lgw_session == *session && e.lgw_wire == *wire)
                || (e.asgw_session == Some(*session) && e.asgw_wire == Some(*wire))
                || e.auth
                    .is_some_and(|a| a.session == *session && a.wire == *wire)
                || e.awaiting_ack.contains(&(*session, *wire));
            if !referenced {
                return Err(format!(
                    "binding {session}/{wire} not referenced by {}",
                    e.ctid
                ));
            }
        }
        for (session, a) in &self.sessions {
            for w in &a.used {
                if !self.bindings.contains_key(&(*session, WireId(*w))) {
                    return Err(format!("wire {session}/{w} used without a binding"));
                }
            }
        }
        Ok(())
    }
}
