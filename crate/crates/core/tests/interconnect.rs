//! Randomized schedules against a simulated gateway population.
//!
//! Broker-to-gateway frames sit in per-session FIFO queues until a `Deliver`
//! step hands them to the simulated gateway; a lost session's queue is
//! discarded. Gateway replies reach the broker immediately.

use std::collections::{BTreeMap, HashMap, VecDeque};

use bytes::Bytes;
use msbc_core::directory::SubscriptionDirectory;
use msbc_core::interconnect::{
    Action, EventKind, Interconnect, Limits, LossCause, SessionId, WireState,
};
use msbc_core::strategies::established_session;
use msbc_core::wire::{
    decode_stream, encode_frame, param, AccessType, ControlMessage, Ctid, DeliveryReport, Frame,
    ReportStatus, Role, TxnGenerator, TxnId, Verb, WireId, WirePacket,
};
use proptest::prelude::*;

const PROVIDERS: [&str; 2] = ["grocery", "health"];

fn directory() -> SubscriptionDirectory {
    SubscriptionDirectory::parse(
        "provider grocery subscriber=sip:grocery@sp\n\
         provider health subscriber=sip:health@sp\n\
         rule milk-* -> grocery\nrule heart-* -> health\nrule heart-0 -> grocery\n",
    )
    .unwrap()
}

fn ctid_for(k: usize) -> Ctid {
    let name = if k.is_multiple_of(2) {
        format!("milk-{k}")
    } else {
        format!("heart-{k}")
    };
    Ctid::new(name).unwrap()
}

#[derive(Debug, Clone)]
enum Op {
    OpenLgw(usize),
    OpenAsgw(usize),
    Lose(usize),
    Commission(usize, usize),
    Decommission(usize, usize),
    SendOnBinding(usize, usize),
    SendOnWire(usize, u32),
    Deliver(usize, usize),
    Tick(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        2 => (0..3usize).prop_map(Op::OpenLgw),
        2 => (0..2usize).prop_map(Op::OpenAsgw),
        1 => any::<usize>().prop_map(Op::Lose),
        4 => (any::<usize>(), 0..6usize).prop_map(|(g, k)| Op::Commission(g, k)),
        1 => (any::<usize>(), any::<usize>()).prop_map(|(g, k)| Op::Decommission(g, k)),
        8 => (any::<usize>(), any::<usize>()).prop_map(|(g, k)| Op::SendOnBinding(g, k)),
        1 => (any::<usize>(), 1..6u32).prop_map(|(g, w)| Op::SendOnWire(g, w)),
        8 => (any::<usize>(), 1..6usize).prop_map(|(g, n)| Op::Deliver(g, n)),
        1 => (0..700u64).prop_map(Op::Tick),
    ]
}

struct Gateway {
    role: Role,
    bound: BTreeMap<WireId, Ctid>,
    last_seq_in: HashMap<WireId, u64>,
    next_seq_out: HashMap<WireId, u64>,
}

#[derive(Default)]
struct Ledger {
    sent: HashMap<u64, Ctid>,
    delivered: HashMap<u64, u32>,
    outcome: HashMap<u64, u16>,
    pending: HashMap<(SessionId, TxnId), u64>,
    /// Highest packet id seen per (ctid, direction-to-asgw).
    last_pid: HashMap<(Ctid, bool), u64>,
}

struct Sim {
    ic: Interconnect,
    now: u64,
    next_sid: u64,
    next_pid: u64,
    txns: TxnGenerator,
    gws: BTreeMap<SessionId, Gateway>,
    queues: BTreeMap<SessionId, VecDeque<Frame>>,
    ledger: Ledger,
    seen: HashMap<EventKind, usize>,
}

impl Sim {
    fn new() -> Self {
        Sim {
            ic: Interconnect::new(
                Limits {
                    keepalive_interval_ms: 200,
                    keepalive_misses: 3,
                    buffer_max_packets: 6,
                    buffer_max_bytes: 200,
                },
                directory(),
            ),
            now: 0,
            next_sid: 1,
            next_pid: 1,
            txns: TxnGenerator::new(),
            gws: BTreeMap::new(),
            queues: BTreeMap::new(),
            ledger: Ledger::default(),
            seen: HashMap::new(),
        }
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send(s, f) => {
                    if let Some(q) = self.queues.get_mut(&s) {
                        q.push_back(f);
                    }
                }
                Action::Close(s) => {
                    self.gws.remove(&s);
                    self.queues.remove(&s);
                }
                Action::Log(e) => *self.seen.entry(e.kind).or_default() += 1,
            }
        }
    }

    fn pick(&self, idx: usize, role: Option<Role>) -> Option<SessionId> {
        let ids: Vec<_> = self
            .gws
            .iter()
            .filter(|(_, g)| role.is_none_or(|r| g.role == r))
            .map(|(s, _)| *s)
            .collect();
        (!ids.is_empty()).then(|| ids[idx % ids.len()])
    }

    fn open(&mut self, subscriber: &str, role: Role, provider: Option<&str>) {
        let sid = SessionId(self.next_sid);
        self.next_sid += 1;
        let session = established_session(subscriber, role, provider, AccessType::Radio, self.now);
        self.gws.insert(
            sid,
            Gateway {
                role,
                bound: BTreeMap::new(),
                last_seq_in: HashMap::new(),
                next_seq_out: HashMap::new(),
            },
        );
        self.queues.insert(sid, VecDeque::new());
        let acts = self.ic.open_session(sid, session, self.now);
        self.apply(acts);
    }

    fn inbound(&mut self, sid: SessionId, frame: Frame) {
        let acts = self.ic.on_frame(sid, frame, self.now);
        self.apply(acts);
    }

    fn control(&mut self, sid: SessionId, msg: ControlMessage) {
        let txn = self.txns.next_txn();
        self.inbound(sid, Frame::Control(txn, msg));
    }

    /// Predicts the broker's handling of a packet from the public table.
    fn oracle(&self, src: SessionId, wire: WireId) -> Expect {
        for (_, e) in self.ic.entries() {
            let from_lgw = e.lgw_session == src && e.lgw_wire == wire;
            let from_asgw = e.asgw_session == Some(src) && e.asgw_wire == Some(wire);
            let awaiting = e.awaiting_ack().contains(&(src, wire));
            match e.state {
                WireState::Active if from_lgw => {
                    return Expect::Forward(e.asgw_session.unwrap(), e.asgw_wire.unwrap())
                }
                WireState::Active if from_asgw => {
                    return Expect::Forward(e.lgw_session, e.lgw_wire)
                }
                WireState::Buffering if from_lgw => return Expect::BufferOr480(e.provider.clone()),
                WireState::Released if awaiting => {
                    return Expect::Report(ReportStatus::PeerUnavailable)
                }
                _ => {}
            }
        }
        Expect::Report(ReportStatus::NoSuchWire)
    }

    fn transmit(&mut self, sid: SessionId, wire: WireId) -> Result<(), TestCaseError> {
        let gw = self.gws.get_mut(&sid).unwrap();
        let seq = gw.next_seq_out.entry(wire).or_insert(0);
        *seq += 1;
        let seq = *seq;
        let ctid = gw.bound.get(&wire).cloned();
        let pid = self.next_pid;
        self.next_pid += 1;
        let label = ctid.as_ref().map_or("-".to_owned(), |c| c.to_string());
        let payload = Bytes::from(format!("{label}|{pid}"));
        let txn = self.txns.next_txn();
        if let Some(c) = &ctid {
            self.ledger.sent.insert(pid, c.clone());
        }
        self.ledger.pending.insert((sid, txn.clone()), pid);
        let expect = self.oracle(sid, wire);
        let buffered_before = match &expect {
            Expect::BufferOr480(p) => self.ic.buffered(p).0,
            _ => 0,
        };
        let pkt = WirePacket {
            txn: txn.clone(),
            wire,
            seq,
            payload: payload.clone(),
        };
        let acts = self.ic.on_frame(sid, Frame::Send(pkt), self.now);
        let sends: Vec<_> = acts
            .iter()
            .filter_map(|a| match a {
                Action::Send(s, f) => Some((*s, f.clone())),
                _ => None,
            })
            .collect();
        match expect {
            Expect::Forward(dest, dest_wire) => {
                prop_assert_eq!(sends.len(), 1);
                let (s, f) = &sends[0];
                prop_assert_eq!(*s, dest);
                match f {
                    Frame::Send(p) => {
                        prop_assert_eq!(p.wire, dest_wire);
                        prop_assert_eq!(&p.payload, &payload);
                    }
                    other => prop_assert!(false, "expected SEND, got {:?}", other),
                }
            }
            Expect::BufferOr480(provider) => {
                let after = self.ic.buffered(&provider).0;
                if after == buffered_before + 1 {
                    prop_assert!(sends.is_empty());
                } else {
                    prop_assert_eq!(after, buffered_before);
                    prop_assert!(matches!(&sends[..], [(s, Frame::Report(r))]
                        if *s == sid && r.status == ReportStatus::PeerUnavailable && r.txn == txn));
                }
            }
            Expect::Report(status) => {
                prop_assert!(
                    matches!(&sends[..], [(s, Frame::Report(r))]
                    if *s == sid && r.status == status && r.txn == txn && r.seq == seq),
                    "expected {:?} from {} on {}, got {:?}\n{:#?}",
                    status,
                    sid,
                    wire,
                    sends,
                    self.ic.entries().collect::<Vec<_>>()
                );
            }
        }
        self.apply(acts);
        Ok(())
    }

    fn deliver(&mut self, sid: SessionId, n: usize) -> Result<(), TestCaseError> {
        for _ in 0..n {
            let Some(frame) = self.queues.get_mut(&sid).and_then(|q| q.pop_front()) else {
                return Ok(());
            };
            self.handle(sid, frame)?;
            self.ic.check_invariants().map_err(TestCaseError::fail)?;
        }
        Ok(())
    }

    fn handle(&mut self, sid: SessionId, frame: Frame) -> Result<(), TestCaseError> {
        let Some(gw) = self.gws.get_mut(&sid) else {
            return Ok(());
        };
        match frame {
            Frame::Control(_, msg) => {
                let ctid = msg.ctid();
                let wire = msg.wire();
                match msg.verb {
                    Verb::Authorize => {
                        let (c, w) = (ctid.unwrap(), wire.unwrap());
                        let allow = !c.as_str().ends_with('5');
                        let verb = if allow {
                            Verb::Authorized
                        } else {
                            Verb::Denied
                        };
                        if allow {
                            prop_assert!(
                                gw.bound.insert(w, c.clone()).is_none(),
                                "wire {} aliased",
                                w
                            );
                        }
                        let reply = ControlMessage::new(verb)
                            .with(param::CTID, &c)
                            .with(param::WIRE, w);
                        self.control(sid, reply);
                    }
                    Verb::Commissioned | Verb::PeerUp => {
                        let (c, w) = (ctid.unwrap(), wire.unwrap());
                        match gw.role {
                            Role::Lgw => {
                                prop_assert!(gw.bound.insert(w, c).is_none(), "wire {} aliased", w)
                            }
                            Role::Asgw => prop_assert_eq!(gw.bound.get(&w), Some(&c)),
                        }
                    }
                    Verb::Decommissioned | Verb::PeerDown => {
                        let (c, w) = (ctid.unwrap(), wire.unwrap());
                        prop_assert_eq!(gw.bound.remove(&w), Some(c.clone()));
                        gw.last_seq_in.remove(&w);
                        gw.next_seq_out.remove(&w);
                        let ack = ControlMessage::new(Verb::Decommissioned)
                            .with(param::CTID, &c)
                            .with(param::WIRE, w);
                        self.control(sid, ack);
                    }
                    Verb::Ping => self.control(sid, ControlMessage::new(Verb::Pong)),
                    _ => {}
                }
            }
            Frame::Send(p) => {
                let bound = gw.bound.get(&p.wire).cloned();
                prop_assert!(bound.is_some(), "SEND on unbound wire {}", p.wire);
                let bound = bound.unwrap();
                let text = String::from_utf8(p.payload.to_vec()).unwrap();
                let (label, pid) = text.split_once('|').unwrap();
                // Blind sends on a guessed wire carry no label.
                let blind = label == "-";
                prop_assert!(
                    blind || label == bound.as_str(),
                    "packet routed to the wrong device"
                );
                let last = gw.last_seq_in.entry(p.wire).or_insert(0);
                prop_assert_eq!(p.seq, *last + 1, "seq gap on {}", p.wire);
                *last = p.seq;
                let pid: u64 = pid.parse().unwrap();
                let count = self.ledger.delivered.entry(pid).or_insert(0);
                *count += 1;
                prop_assert_eq!(*count, 1, "packet {} delivered twice", pid);
                if !blind {
                    let key = (bound.clone(), gw.role == Role::Asgw);
                    let prev = self.ledger.last_pid.insert(key, pid).unwrap_or(0);
                    prop_assert!(pid > prev, "reordered: {} after {}", pid, prev);
                }
                let r = DeliveryReport {
                    txn: p.txn,
                    wire: p.wire,
                    seq: p.seq,
                    status: ReportStatus::Delivered,
                };
                self.inbound(sid, Frame::Report(r));
            }
            Frame::Report(r) => {
                let pid = self.ledger.pending.remove(&(sid, r.txn.clone()));
                prop_assert!(pid.is_some(), "report for unknown txn");
                let pid = pid.unwrap();
                prop_assert!(self.ledger.outcome.insert(pid, r.status.code()).is_none());
            }
            Frame::Signal(..) => prop_assert!(false, "signal on payload channel"),
        }
        Ok(())
    }

    fn step(&mut self, op: Op) -> Result<(), TestCaseError> {
        self.now += 1;
        match op {
            Op::OpenLgw(k) => self.open(&format!("sip:lgw-{k}@home"), Role::Lgw, None),
            Op::OpenAsgw(p) => {
                let p = PROVIDERS[p];
                self.open(&format!("sip:{p}@sp"), Role::Asgw, Some(p))
            }
            Op::Lose(i) => {
                if let Some(s) = self.pick(i, None) {
                    let acts = self.ic.close_session(s, self.now, LossCause::TransportLost);
                    self.apply(acts);
                }
            }
            Op::Commission(i, k) => {
                if let Some(s) = self.pick(i, Some(Role::Lgw)) {
                    let msg = ControlMessage::new(Verb::Commission).with(param::CTID, ctid_for(k));
                    self.control(s, msg);
                }
            }
            Op::Decommission(i, k) => {
                if let Some(s) = self.pick(i, None) {
                    let bound: Vec<_> = self.gws[&s].bound.values().cloned().collect();
                    if !bound.is_empty() {
                        let c = &bound[k % bound.len()];
                        self.control(
                            s,
                            ControlMessage::new(Verb::Decommission).with(param::CTID, c),
                        );
                    }
                }
            }
            Op::SendOnBinding(i, k) => {
                if let Some(s) = self.pick(i, None) {
                    let wires: Vec<_> = self.gws[&s].bound.keys().copied().collect();
                    if !wires.is_empty() {
                        self.transmit(s, wires[k % wires.len()])?;
                    }
                }
            }
            Op::SendOnWire(i, w) => {
                if let Some(s) = self.pick(i, None) {
                    self.transmit(s, WireId(w))?;
                }
            }
            Op::Deliver(i, n) => {
                if let Some(s) = self.pick(i, None) {
                    self.deliver(s, n)?;
                }
            }
            Op::Tick(dt) => {
                self.now += dt;
                let acts = self.ic.tick(self.now);
                self.apply(acts);
            }
        }
        self.ic.check_invariants().map_err(TestCaseError::fail)
    }

    fn drain(&mut self) -> Result<(), TestCaseError> {
        loop {
            let busy: Vec<_> = self
                .queues
                .iter()
                .filter(|(_, q)| !q.is_empty())
                .map(|(s, _)| *s)
                .collect();
            if busy.is_empty() {
                return Ok(());
            }
            for s in busy {
                self.deliver(s, usize::MAX)?;
            }
        }
    }

    fn check_conservation(&self) -> Result<(), TestCaseError> {
        for pid in self.ledger.sent.keys() {
            let delivered = self.ledger.delivered.get(pid).copied().unwrap_or(0);
            match self.ledger.outcome.get(pid) {
                Some(200) => prop_assert_eq!(delivered, 1, "packet {} reported delivered", pid),
                Some(code) => prop_assert_eq!(delivered, 0, "packet {} reported {}", pid, code),
                None => prop_assert!(delivered <= 1),
            }
        }
        Ok(())
    }
}

enum Expect {
    Forward(SessionId, WireId),
    BufferOr480(String),
    Report(ReportStatus),
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn random_schedules_keep_every_invariant(ops in proptest::collection::vec(op(), 1..250)) {
        let mut sim = Sim::new();
        for op in ops {
            sim.step(op)?;
        }
        sim.drain()?;
        sim.check_conservation()?;
    }

    /// Extra headers a device might add cannot change where a packet goes.
    #[test]
    fn bogus_headers_do_not_affect_routing(
        junk in proptest::collection::vec(("[A-Z][a-z]{1,8}", "[a-z0-9:@.]{1,16}"), 1..5),
        pick in any::<usize>(),
    ) {
        let mut sim = Sim::new();
        sim.open("sip:lgw-0@home", Role::Lgw, None);
        sim.open("sip:grocery@sp", Role::Asgw, Some("grocery"));
        sim.open("sip:health@sp", Role::Asgw, Some("health"));
        for k in 0..4 {
            sim.control(SessionId(1), ControlMessage::new(Verb::Commission).with(param::CTID, ctid_for(k)));
        }
        sim.drain()?;
        let wires: Vec<_> = sim.gws[&SessionId(1)].bound.keys().copied().collect();
        let wire = wires[pick % wires.len()];
        let pkt = Frame::Send(WirePacket {
            txn: TxnId::new("tjunk0001").unwrap(),
            wire,
            seq: 1,
            payload: Bytes::from_static(b"reading"),
        });
        let clean = encode_frame(&pkt).unwrap();
        let head_end = clean.windows(2).position(|w| w == b"\r\n").unwrap() + 2;
        let mut dirty = clean[..head_end].to_vec();
        for (k, v) in &junk {
            if ["Wire", "Seq", "Length"].contains(&k.as_str()) {
                continue;
            }
            dirty.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
        }
        dirty.extend_from_slice(&clean[head_end..]);
        let (frames, used) = decode_stream(&dirty).unwrap();
        prop_assert_eq!(used, dirty.len());
        let mut a = sim.ic.clone();
        let mut b = sim.ic.clone();
        let clean_out = a.on_frame(SessionId(1), pkt, sim.now);
        let dirty_out = b.on_frame(SessionId(1), frames.into_iter().next().unwrap(), sim.now);
        prop_assert_eq!(clean_out, dirty_out);
    }
}

#[test]
fn schedules_reach_the_interesting_paths() {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::TestRunner;

    let mut runner = TestRunner::deterministic();
    let strategy = proptest::collection::vec(op(), 150..250);
    let mut seen: HashMap<EventKind, usize> = HashMap::new();
    let mut outcomes: HashMap<u16, usize> = HashMap::new();
    for _ in 0..200 {
        let ops = strategy.new_tree(&mut runner).unwrap().current();
        let mut sim = Sim::new();
        for op in ops {
            sim.step(op).unwrap();
        }
        sim.drain().unwrap();
        sim.check_conservation().unwrap();
        for (k, n) in sim.seen {
            *seen.entry(k).or_default() += n;
        }
        for code in sim.ledger.outcome.values() {
            *outcomes.entry(*code).or_default() += 1;
        }
    }
    for kind in [
        EventKind::WireActive,
        EventKind::WireDenied,
        EventKind::WireBuffering,
        EventKind::WireRestored,
        EventKind::WireReleased,
        EventKind::WireFreed,
        EventKind::PacketBuffered,
        EventKind::PacketFlushed,
        EventKind::KeepaliveExpired,
        EventKind::SessionSuperseded,
    ] {
        assert!(
            seen.get(&kind).copied().unwrap_or(0) > 0,
            "never saw {kind}: {seen:?}"
        );
    }
    for code in [200, 480, 481] {
        assert!(
            outcomes.get(&code).copied().unwrap_or(0) > 0,
            "never saw {code}: {outcomes:?}"
        );
    }
}
