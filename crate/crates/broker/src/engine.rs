//! Single-owner task driving the interconnect and the signaling dialogs.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use msbc_core::directory::SubscriptionDirectory;
use msbc_core::interconnect::{Action, Event, EventKind, Interconnect, LossCause, SessionId};
use msbc_core::session::{on_signal, LocalParams, Session, SessionState, SignalAction};
use msbc_core::wire::{
    param, AccessType, ControlMessage, Frame, Method, Security, SignalMessage, TxnId, Verb,
};
use tokio::sync::{broadcast, mpsc, oneshot};

use crate::{EntryView, SessionView, Snapshot};

pub(crate) type Outbox = mpsc::UnboundedSender<Frame>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct ConnId(pub u64);

pub(crate) enum Input {
    SignalOpen {
        conn: ConnId,
        peer: SocketAddr,
        out: Outbox,
    },
    Signal {
        conn: ConnId,
        txn: TxnId,
        msg: SignalMessage,
    },
    SignalClosed {
        conn: ConnId,
    },
    Attach(Attach),
    Payload {
        session: SessionId,
        frame: Frame,
    },
    PayloadClosed {
        session: SessionId,
    },
    Snapshot(oneshot::Sender<Snapshot>),
    SetDirectory(SubscriptionDirectory, oneshot::Sender<()>),
}

pub(crate) struct Attach {
    pub call_id: String,
    pub txn: TxnId,
    pub security: Security,
    pub peer: SocketAddr,
    pub out: Outbox,
    pub reply: oneshot::Sender<Option<SessionId>>,
}

struct Dialog {
    session: Session,
    attached: Option<SessionId>,
    waiting: Option<Attach>,
}

pub(crate) struct Engine {
    ic: Interconnect,
    local: LocalParams,
    epoch: Instant,
    events: broadcast::Sender<Event>,
    signal_out: HashMap<ConnId, Outbox>,
    peers: HashMap<ConnId, SocketAddr>,
    dialogs: HashMap<ConnId, Dialog>,
    by_call: HashMap<String, ConnId>,
    by_session: HashMap<SessionId, ConnId>,
    payload_out: HashMap<SessionId, Outbox>,
    next_session: u64,
}

impl Engine {
    pub fn new(
        ic: Interconnect,
        max_frame_size: u32,
        payload_endpoint: String,
        epoch: Instant,
        events: broadcast::Sender<Event>,
    ) -> Self {
        Engine {
            ic,
            local: LocalParams {
                identity: msbc_core::session::BROKER_IDENTITY.into(),
                access: AccessType::Radio,
                max_frame_size,
                payload_endpoint,
            },
            epoch,
            events,
            signal_out: HashMap::new(),
            peers: HashMap::new(),
            dialogs: HashMap::new(),
            by_call: HashMap::new(),
            by_session: HashMap::new(),
            payload_out: HashMap::new(),
            next_session: 0,
        }
    }

    fn now(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    pub async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Input>) {
        let period = crate::tick_period_ms(self.ic.limits().keepalive_interval_ms);
        let mut ticker = tokio::time::interval(Duration::from_millis(period));
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                input = rx.recv() => match input {
                    Some(input) => self.handle(input),
                    None => break,
                },
                _ = ticker.tick() => {
                    let now = self.now();
                    let actions = self.ic.tick(now);
                    self.apply(actions);
                }
            }
        }
        debug!("engine stopped");
    }

    fn handle(&mut self, input: Input) {
        let now = self.now();
        match input {
            Input::SignalOpen { conn, peer, out } => {
                self.signal_out.insert(conn, out);
                self.peers.insert(conn, peer);
            }
            Input::Signal { conn, txn, msg } => self.on_signal(conn, txn, msg, now),
            Input::SignalClosed { conn } => {
                self.signal_out.remove(&conn);
                self.peers.remove(&conn);
                if let Some(dialog) = self.remove_dialog(conn) {
                    if let Some(sid) = dialog.attached {
                        self.by_session.remove(&sid);
                        let actions = self.ic.close_session(sid, now, LossCause::TransportLost);
                        self.apply(actions);
                    }
                }
            }
            Input::Attach(attach) => self.on_attach(attach, now),
            Input::Payload { session, frame } => {
                let actions = self.ic.on_frame(session, frame, now);
                self.apply(actions);
            }
            Input::PayloadClosed { session } => {
                if self.payload_out.contains_key(&session) {
                    let actions = self
                        .ic
                        .close_session(session, now, LossCause::TransportLost);
                    self.apply(actions);
                }
            }
            Input::Snapshot(reply) => {
                let _ = reply.send(self.snapshot());
            }
            Input::SetDirectory(dir, reply) => {
                self.ic.set_directory(dir);
                let _ = reply.send(());
            }
        }
    }

    fn on_signal(&mut self, conn: ConnId, txn: TxnId, msg: SignalMessage, now: u64) {
        let Some(out) = self.signal_out.get(&conn).cloned() else {
            return;
        };
        if !self.dialogs.contains_key(&conn) {
            let peer = self
                .peers
                .get(&conn)
                .map(|p| p.to_string())
                .unwrap_or_default();
            self.dialogs.insert(
                conn,
                Dialog {
                    session: Session::answering(self.local.clone(), &peer, now),
                    attached: None,
                    waiting: None,
                },
            );
        }
        let dialog = self.dialogs.get_mut(&conn).expect("dialog just ensured");

        if msg.method() == Some(Method::Invite) && dialog.session.state == SessionState::Idle {
            if let Some(offer) = &msg.body {
                if let Err(refusal) =
                    self.ic
                        .admit(offer.role, &msg.from, offer.provider.as_deref())
                {
                    let reply =
                        msg.response(refusal.status, &refusal.reason, self.local.access, None);
                    let _ = out.send(Frame::Signal(txn, reply));
                    self.dialogs.remove(&conn);
                    self.emit(Event::new(now, EventKind::SessionRefused));
                    info!(
                        "refused {} from {}: {}",
                        msg.call_id, msg.from, refusal.reason
                    );
                    return;
                }
            }
        }

        let (next, actions) = on_signal(&dialog.session, &msg, now);
        dialog.session = next;
        if !dialog.session.call_id.is_empty() {
            self.by_call.insert(dialog.session.call_id.clone(), conn);
        }
        for action in actions {
            match action {
                SignalAction::Send(reply) => {
                    let _ = out.send(Frame::Signal(txn.clone(), reply));
                }
                SignalAction::Established(_) => {
                    let waiting = self.dialogs.get_mut(&conn).and_then(|d| d.waiting.take());
                    if let Some(attach) = waiting {
                        self.complete_attach(conn, attach, now);
                    }
                }
                SignalAction::Closed => {
                    if let Some(dialog) = self.remove_dialog(conn) {
                        if let Some(sid) = dialog.attached {
                            self.by_session.remove(&sid);
                            let actions = self.ic.close_session(sid, now, LossCause::Closed);
                            self.apply(actions);
                        }
                    }
                }
                SignalAction::OpenPayloadChannel(_) | SignalAction::Rejected { .. } => {}
            }
        }
    }

    fn on_attach(&mut self, attach: Attach, now: u64) {
        let Some(&conn) = self.by_call.get(&attach.call_id) else {
            debug!("attach for unknown call {}", attach.call_id);
            let _ = attach.reply.send(None);
            return;
        };
        let Some(dialog) = self.dialogs.get_mut(&conn) else {
            let _ = attach.reply.send(None);
            return;
        };
        if dialog.attached.is_some() || dialog.waiting.is_some() {
            let _ = attach.reply.send(None);
            return;
        }
        match dialog.session.state {
            SessionState::Established => self.complete_attach(conn, attach, now),
            SessionState::InviteReceived => dialog.waiting = Some(attach),
            _ => {
                let _ = attach.reply.send(None);
            }
        }
    }

    fn complete_attach(&mut self, conn: ConnId, attach: Attach, now: u64) {
        let dialog = self.dialogs.get_mut(&conn).expect("attach to live dialog");
        let required = dialog.session.negotiated.as_ref().map(|n| n.security);
        if required == Some(Security::Secure) && attach.security != Security::Secure {
            warn!(
                "{}: secure channel negotiated, plain attach refused",
                attach.call_id
            );
            let _ = attach.reply.send(None);
            return;
        }
        self.next_session += 1;
        let sid = SessionId(self.next_session);
        dialog.attached = Some(sid);
        let mut session = dialog.session.clone();
        session.remote_endpoint = attach.peer.to_string();
        self.by_session.insert(sid, conn);
        let ok = ControlMessage::new(Verb::Attached).with(param::CALL_ID, &attach.call_id);
        let _ = attach.out.send(Frame::Control(attach.txn, ok));
        self.payload_out.insert(sid, attach.out);
        let _ = attach.reply.send(Some(sid));
        let actions = self.ic.open_session(sid, session, now);
        self.apply(actions);
    }

    fn remove_dialog(&mut self, conn: ConnId) -> Option<Dialog> {
        let mut dialog = self.dialogs.remove(&conn)?;
        if self.by_call.get(&dialog.session.call_id) == Some(&conn) {
            self.by_call.remove(&dialog.session.call_id);
        }
        if let Some(attach) = dialog.waiting.take() {
            let _ = attach.reply.send(None);
        }
        Some(dialog)
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for action in actions {
            match action {
                Action::Send(sid, frame) => {
                    if let Some(out) = self.payload_out.get(&sid) {
                        let _ = out.send(frame);
                    }
                }
                Action::Close(sid) => {
                    self.payload_out.remove(&sid);
                    if let Some(conn) = self.by_session.remove(&sid) {
                        self.remove_dialog(conn);
                        self.signal_out.remove(&conn);
                        self.peers.remove(&conn);
                    }
                }
                Action::Log(event) => self.emit(event),
            }
        }
    }

    fn emit(&mut self, event: Event) {
        if event.kind.is_detail() {
            debug!(target: "msbc::event", "{event}");
        } else {
            info!(target: "msbc::event", "{event}");
        }
        let _ = self.events.send(event);
    }

    fn snapshot(&self) -> Snapshot {
        let sessions = self
            .ic
            .session_ids()
            .filter_map(|id| {
                let s = self.ic.session(id)?;
                Some(SessionView {
                    id,
                    subscriber: s.subscriber.clone(),
                    role: s.role,
                    provider: s.provider.clone(),
                    access: s.access,
                    security: s
                        .negotiated
                        .as_ref()
                        .map_or(Security::Plain, |n| n.security),
                    remote_endpoint: s.remote_endpoint.clone(),
                })
            })
            .collect();
        let entries = self
            .ic
            .entries()
            .map(|(_, e)| EntryView {
                ctid: e.ctid.clone(),
                provider: e.provider.clone(),
                state: e.state,
                lgw: (e.lgw_session, e.lgw_wire),
                asgw: e.asgw_session.zip(e.asgw_wire),
                buffered_packets: e.buffered_packets(),
                awaiting_ack: e.awaiting_ack().len(),
            })
            .collect();
        Snapshot {
            at: self.now(),
            sessions,
            entries,
            dialogs: self.dialogs.len(),
            in_flight: self.ic.in_flight(),
            quarantined: self.ic.quarantined(),
        }
    }
}
