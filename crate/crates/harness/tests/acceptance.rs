//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them. Run with `--nocapture` or read the lines in
//! the test output; they are written past the capture.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::future::Future;
use std::io::Write;
use std::path::Path;

use msbc_core::directory::SubscriptionDirectory;
use msbc_core::interconnect::{Action, EventKind, Interconnect, Limits, LossCause, SessionId};
use msbc_core::session::{
    on_signal, DialogFactory, LocalParams, Session, SessionState, SignalAction, BROKER_IDENTITY,
};
use msbc_core::strategies;
use msbc_core::wire::{
    decode_stream, encode_frame, param, AccessType, CSeq, ControlMessage, Ctid, Frame, Method,
    Role, Security, SessionOffer, SignalMessage, SignalStart, TxnGenerator, Verb, WireId,
};
use msbc_gateway::GatewayEvent;
use msbc_harness::{run_scenario, RunResult, Scenario};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;

const WIRE_SETUP_CYCLES: usize = 100;
const WIRE_SETUP_MEDIAN_MS: f64 = 75.0;
const TRANSFER_PACKETS: usize = 1000;
const TRANSFER_MEDIAN_MS: f64 = 50.0;
const SHUTDOWN_WIRES: usize = 5;
const PEER_DOWN_WITHIN_MS: f64 = 1000.0;
const MIGRATION_PACKETS: usize = 50;
const CODEC_CASES: u32 = 2000;
const FUZZ_INPUTS: usize = 100_000;
const ROUTING_PAIRS: usize = 10_000;
const ROUTE_TABLE_CASES: u32 = 300;

struct Verdict {
    ok: bool,
    detail: String,
}

fn check(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Verdict {
    check(false, detail)
}

async fn scenario(name: &str) -> Result<RunResult, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.msbc"));
    let s = Scenario::load(&path).map_err(|e| e.to_string())?;
    run_scenario(&s, SEED).await.map_err(|f| f.to_string())
}

fn ctid(s: &str) -> Ctid {
    Ctid::new(s).unwrap()
}

fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(
        config.clone(),
        TestRng::deterministic_rng(config.rng_algorithm),
    )
}

fn received(r: &RunResult, gw: &str, c: &str) -> Vec<bytes::Bytes> {
    r.received
        .get(&(gw.to_owned(), ctid(c)))
        .cloned()
        .unwrap_or_default()
}

fn sent(r: &RunResult, gw: &str, c: &str) -> Vec<bytes::Bytes> {
    r.sent
        .get(&(gw.to_owned(), ctid(c)))
        .cloned()
        .unwrap_or_default()
}

async fn wire_lifecycle() -> Verdict {
    let r = match scenario("add_remove_ct").await {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let Some(s) = r.report.wire_setup_ms.summary() else {
        return fail("no samples");
    };
    check(
        s.count == WIRE_SETUP_CYCLES && s.median < WIRE_SETUP_MEDIAN_MS,
        format!(
            "n={} median={:.3} ms p95={:.3} ms (need n={WIRE_SETUP_CYCLES}, median < {WIRE_SETUP_MEDIAN_MS} ms)",
            s.count, s.median, s.p95
        ),
    )
}

async fn transfer() -> Verdict {
    let r = match scenario("transfer").await {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let Some(s) = r.report.transfer_rtt_ms.summary() else {
        return fail("no samples");
    };
    let exact = received(&r, "health", "heart-1") == sent(&r, "home", "heart-1");
    let ok = s.count == TRANSFER_PACKETS
        && s.median < TRANSFER_MEDIAN_MS
        && r.report.packets_lost == 0
        && exact;
    check(
        ok,
        format!(
            "n={} median={:.3} ms p95={:.3} ms lost={} payloads_match={exact} (need n={TRANSFER_PACKETS}, median < {TRANSFER_MEDIAN_MS} ms, lost=0)",
            s.count, s.median, s.p95, r.report.packets_lost
        ),
    )
}

async fn clean_shutdown() -> Verdict {
    let r = match scenario("clean_shutdown").await {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let Some(snap) = &r.snapshot else {
        return fail("no broker snapshot");
    };
    let house = "sip:lgw@home";
    let wires: [(&str, &str); SHUTDOWN_WIRES] = [
        ("heart-1", "health"),
        ("heart-2", "health"),
        ("milk-1", "grocery"),
        ("door-1", "security"),
        ("camera-1", "security"),
    ];
    let mut problems = Vec::new();
    if snap.session_of(house).is_some() {
        problems.push("house session still open".to_owned());
    }
    if !snap.entries.is_empty() {
        problems.push(format!("{} wire table entries left", snap.entries.len()));
    }
    if snap.dialogs != snap.sessions.len() {
        problems.push(format!(
            "{} dialogs for {} sessions",
            snap.dialogs,
            snap.sessions.len()
        ));
    }
    // The providers stay up, so the house is the one opened session missing
    // from the final snapshot.
    let gone: Vec<_> = r
        .events
        .iter()
        .filter(|e| e.kind == EventKind::SessionOpened)
        .filter_map(|e| e.session)
        .filter(|s| snap.sessions.iter().all(|v| v.id != *s))
        .collect();
    let house_session = match gone.as_slice() {
        [one] => Some(*one),
        _ => {
            problems.push(format!(
                "expected one departed session, found {}",
                gone.len()
            ));
            None
        }
    };
    let closed = r.events.iter().any(|e| {
        e.kind == EventKind::SessionClosed && e.session.is_some() && e.session == house_session
    });
    if !closed {
        problems.push("no session.closed for the house".to_owned());
    }
    for (c, provider) in wires {
        let c = ctid(c);
        let released = r
            .events
            .iter()
            .any(|e| e.kind == EventKind::WireReleased && e.ctid.as_ref() == Some(&c));
        if !released {
            problems.push(format!("no wire.released for {c}"));
        }
        let told = r.gateways[provider]
            .events
            .iter()
            .filter(|e| **e == GatewayEvent::Decommissioned(c.clone()))
            .count();
        if told != 1 {
            problems.push(format!("{provider} saw DECOMMISSIONED {c} {told} times"));
        }
    }
    let clean = r.report.teardown_clean == Some(true);
    check(
        problems.is_empty() && clean,
        format!(
            "wires={SHUTDOWN_WIRES} teardown_clean={clean} entries_left={} sessions_left={} {}",
            snap.entries.len(),
            snap.sessions.len(),
            problems.join("; ")
        ),
    )
}

async fn watchdog() -> Verdict {
    let r = match scenario("watchdog").await {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let peer_down = r.report.metric("peer_down_ms");
    let detect = r.report.watchdog_detect_ms;
    let bound = r.report.metric("watchdog_bound_ms");
    let told = [("health", "heart-1"), ("grocery", "milk-1")]
        .iter()
        .all(|(p, c)| {
            r.gateways[*p]
                .events
                .contains(&GatewayEvent::PeerDown(ctid(c)))
        });
    let ok = told
        && peer_down.is_some_and(|v| v <= PEER_DOWN_WITHIN_MS)
        && matches!((detect, bound), (Some(d), Some(b)) if d as f64 <= b);
    check(
        ok,
        format!(
            "peer_down={peer_down:?} ms (<= {PEER_DOWN_WITHIN_MS}) detect={detect:?} ms bound={bound:?} ms all_providers_told={told}"
        ),
    )
}

async fn access_switch() -> Verdict {
    let r = match scenario("access_switch").await {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let home = &r.gateways["home"];
    let same = r.report.metric("switch_ctids_same") == Some(1.0);
    let secure = home.security == Some(Security::Secure) && home.access == AccessType::Internet;
    let gaps = r.report.metric("seq_gaps");
    let contiguous = received(&r, "health", "heart-1") == sent(&r, "home", "heart-1")
        && received(&r, "automation", "thermo-1") == sent(&r, "home", "thermo-1");
    let session = r
        .snapshot
        .as_ref()
        .and_then(|s| s.session_of(&home.subscriber));
    let broker_view =
        session.is_some_and(|s| s.security == Security::Secure && s.access == AccessType::Internet);
    check(
        same && secure && gaps == Some(0.0) && contiguous && broker_view,
        format!(
            "ctids_same={same} secure={secure} broker_view_secure={broker_view} seq_gaps={gaps:?} streams_exact={contiguous}"
        ),
    )
}

async fn as_migration() -> Verdict {
    let r = match scenario("as_migration").await {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    let all = sent(&r, "home", "heart-1");
    let tail = &all[all.len().saturating_sub(MIGRATION_PACKETS)..];
    let got = received(&r, "health2", "heart-1");
    let before = received(&r, "health", "heart-1");
    let exact = got == tail && before == all[..all.len() - tail.len()];
    let conservation = r.report.conservation_holds();
    check(
        exact && tail.len() == MIGRATION_PACKETS && conservation && r.report.packets_lost == 0,
        format!(
            "migrated={}/{MIGRATION_PACKETS} exactly_once_in_order={exact} lost={} conservation={conservation}",
            got.len(),
            r.report.packets_lost
        ),
    )
}

fn codec_properties() -> Verdict {
    let roundtrip = runner(CODEC_CASES).run(&strategies::frame(), |frame| {
        let bytes = encode_frame(&frame).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (frames, used) =
            decode_stream(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(frames, vec![frame]);
        Ok(())
    });
    let chunks = (
        proptest::collection::vec(strategies::frame(), 1..6),
        proptest::collection::vec(any::<prop::sample::Index>(), 0..10),
    );
    let chunked = runner(CODEC_CASES / 2).run(&chunks, |(frames, cuts)| {
        let stream: Vec<u8> = frames
            .iter()
            .flat_map(|f| encode_frame(f).unwrap())
            .collect();
        let mut points: Vec<usize> = cuts.iter().map(|i| i.index(stream.len() + 1)).collect();
        points.push(stream.len());
        points.sort_unstable();
        let mut buffer = Vec::new();
        let mut out = Vec::new();
        let mut fed = 0;
        for p in points {
            buffer.extend_from_slice(&stream[fed..p]);
            fed = p;
            let (got, used) =
                decode_stream(&buffer).map_err(|e| TestCaseError::fail(e.to_string()))?;
            out.extend(got);
            buffer.drain(..used);
        }
        prop_assert!(buffer.is_empty());
        prop_assert_eq!(out, frames);
        Ok(())
    });

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut gen = runner(1);
    let seeds: Vec<Vec<u8>> = (0..64)
        .map(|_| encode_frame(&strategies::frame().new_tree(&mut gen).unwrap().current()).unwrap())
        .collect();
    let (mut accepted, mut rejected, mut reencode_bad) = (0usize, 0usize, 0usize);
    for i in 0..FUZZ_INPUTS {
        let input: Vec<u8> = if i % 2 == 0 {
            let mut v: Vec<u8> = if i % 4 == 0 {
                b"MSBC ".to_vec()
            } else {
                Vec::new()
            };
            let len = rng.gen_range(0..128);
            v.extend((0..len).map(|_| rng.gen::<u8>()));
            v
        } else {
            let mut v = seeds[rng.gen_range(0..seeds.len())].clone();
            for _ in 0..rng.gen_range(1..4) {
                let at = rng.gen_range(0..v.len());
                match rng.gen_range(0..3) {
                    0 => v[at] = rng.gen(),
                    1 => {
                        v.remove(at);
                    }
                    _ => v.insert(at, rng.gen()),
                }
                if v.is_empty() {
                    break;
                }
            }
            v
        };
        match decode_stream(&input) {
            Ok((frames, used)) => {
                assert!(used <= input.len());
                accepted += 1;
                for f in frames {
                    let again = encode_frame(&f).ok().and_then(|b| decode_stream(&b).ok());
                    if again.map(|(fs, _)| fs) != Some(vec![f]) {
                        reencode_bad += 1;
                    }
                }
            }
            Err(e) => {
                assert!(e.offset <= input.len());
                rejected += 1;
            }
        }
    }
    let ok = roundtrip.is_ok() && chunked.is_ok() && reencode_bad == 0;
    check(
        ok,
        format!(
            "roundtrip={} chunked={} fuzz={FUZZ_INPUTS} inputs (accepted={accepted} rejected={rejected} reencode_mismatch={reencode_bad}) no panic",
            roundtrip.map_or_else(|e| e.to_string(), |_| format!("{CODEC_CASES} ok")),
            chunked.map_or_else(|e| e.to_string(), |_| format!("{} ok", CODEC_CASES / 2)),
        ),
    )
}

/// Exact rule first, else the longest matching prefix rule.
fn longest_prefix<'a>(rules: &'a [(String, String)], c: &str) -> Option<&'a str> {
    if let Some((_, p)) = rules.iter().find(|(pat, _)| pat == c) {
        return Some(p);
    }
    rules
        .iter()
        .filter_map(|(pat, p)| {
            pat.strip_suffix('*')
                .filter(|pre| c.starts_with(pre))
                .map(|pre| (pre.len(), p))
        })
        .max_by_key(|(len, _)| *len)
        .map(|(_, p)| p.as_str())
}

fn directory_oracle() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let alphabet = b"ab-1";
    let word = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> String {
        let n = rng.gen_range(lo..=hi);
        (0..n)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char)
            .collect()
    };
    let mut resolved = 0;
    for pair in 0..ROUTING_PAIRS {
        let mut dir = SubscriptionDirectory::new();
        let providers = rng.gen_range(1..=4);
        for p in 0..providers {
            dir.add_provider(&format!("p{p}"), &format!("sip:p{p}@sp"))
                .unwrap();
        }
        let mut kept = Vec::new();
        for _ in 0..rng.gen_range(0..10) {
            let mut pattern = word(&mut rng, 0, 4);
            if pattern.is_empty() || rng.gen_bool(0.6) {
                pattern.push('*');
            }
            let provider = format!("p{}", rng.gen_range(0..providers));
            if dir.add_rule(&pattern, &provider).is_ok() {
                kept.push((pattern, provider));
            }
        }
        let Ok(c) = Ctid::new(word(&mut rng, 1, 5)) else {
            continue;
        };
        let got = dir.lookup_provider(&c).ok();
        let want = longest_prefix(&kept, c.as_str());
        if got != want {
            return Err(format!(
                "pair {pair}: {c} gave {got:?}, oracle {want:?}, rules {kept:?}"
            ));
        }
        resolved += usize::from(want.is_some());
    }
    Ok(resolved)
}

const ROUTE_PROVIDERS: [&str; 2] = ["grocery", "health"];

#[derive(Debug, Clone)]
enum NetOp {
    OpenLgw(usize),
    OpenAsgw(usize),
    Commission(usize, usize),
    Decommission(usize, usize),
    Lose(usize),
}

fn net_op() -> impl Strategy<Value = NetOp> {
    prop_oneof![
        2 => (0..3usize).prop_map(NetOp::OpenLgw),
        2 => (0..2usize).prop_map(NetOp::OpenAsgw),
        6 => (any::<usize>(), 0..8usize).prop_map(|(g, k)| NetOp::Commission(g, k)),
        2 => (any::<usize>(), any::<usize>()).prop_map(|(g, k)| NetOp::Decommission(g, k)),
        1 => any::<usize>().prop_map(NetOp::Lose),
    ]
}

/// Gateways that answer instantly. Bindings come only from control frames
/// the broker sent, so the oracle never reads the broker's table.
struct Net {
    ic: Interconnect,
    now: u64,
    next: u64,
    txns: TxnGenerator,
    roles: BTreeMap<SessionId, Role>,
    bound: BTreeMap<SessionId, BTreeMap<WireId, Ctid>>,
    queue: VecDeque<(SessionId, Frame)>,
}

impl Net {
    fn new() -> Self {
        let dir = SubscriptionDirectory::parse(
            "provider grocery subscriber=sip:grocery@sp\n\
             provider health subscriber=sip:health@sp\n\
             rule milk-* -> grocery\nrule heart-* -> health\nrule heart-9 -> grocery\n",
        )
        .unwrap();
        let limits = Limits {
            keepalive_interval_ms: 1000,
            keepalive_misses: 3,
            buffer_max_packets: 16,
            buffer_max_bytes: 4096,
        };
        Net {
            ic: Interconnect::new(limits, dir),
            now: 0,
            next: 1,
            txns: TxnGenerator::new(),
            roles: BTreeMap::new(),
            bound: BTreeMap::new(),
            queue: VecDeque::new(),
        }
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send(s, f) => self.queue.push_back((s, f)),
                Action::Close(s) => {
                    self.roles.remove(&s);
                    self.bound.remove(&s);
                }
                Action::Log(_) => {}
            }
        }
    }

    fn pick(&self, i: usize, role: Option<Role>) -> Option<SessionId> {
        let ids: Vec<_> = self
            .roles
            .iter()
            .filter(|(_, r)| role.is_none_or(|x| **r == x))
            .map(|(s, _)| *s)
            .collect();
        (!ids.is_empty()).then(|| ids[i % ids.len()])
    }

    fn open(&mut self, subscriber: &str, role: Role, provider: Option<&str>) {
        let sid = SessionId(self.next);
        self.next += 1;
        let session = strategies::established_session(
            subscriber,
            role,
            provider,
            AccessType::Radio,
            self.now,
        );
        self.roles.insert(sid, role);
        self.bound.insert(sid, BTreeMap::new());
        let acts = self.ic.open_session(sid, session, self.now);
        self.apply(acts);
    }

    fn control(&mut self, sid: SessionId, msg: ControlMessage) {
        let txn = self.txns.next_txn();
        let acts = self.ic.on_frame(sid, Frame::Control(txn, msg), self.now);
        self.apply(acts);
    }

    fn pump(&mut self) {
        while let Some((sid, frame)) = self.queue.pop_front() {
            if !self.roles.contains_key(&sid) {
                continue;
            }
            let Frame::Control(_, msg) = frame else {
                continue;
            };
            let (Some(c), Some(w)) = (msg.ctid(), msg.wire()) else {
                if msg.verb == Verb::Ping {
                    self.control(sid, ControlMessage::new(Verb::Pong));
                }
                continue;
            };
            match msg.verb {
                Verb::Authorize => {
                    let allow = !c.as_str().ends_with('7');
                    if allow {
                        self.bound.get_mut(&sid).unwrap().insert(w, c.clone());
                    }
                    let verb = if allow {
                        Verb::Authorized
                    } else {
                        Verb::Denied
                    };
                    self.control(
                        sid,
                        ControlMessage::new(verb)
                            .with(param::CTID, &c)
                            .with(param::WIRE, w),
                    );
                }
                Verb::Commissioned | Verb::PeerUp => {
                    self.bound.get_mut(&sid).unwrap().insert(w, c);
                }
                Verb::Decommissioned | Verb::PeerDown => {
                    self.bound.get_mut(&sid).unwrap().remove(&w);
                    let ack = ControlMessage::new(Verb::Decommissioned)
                        .with(param::CTID, &c)
                        .with(param::WIRE, w);
                    self.control(sid, ack);
                }
                _ => {}
            }
        }
    }

    fn step(&mut self, op: NetOp) {
        self.now += 1;
        match op {
            NetOp::OpenLgw(k) => self.open(&format!("sip:lgw-{k}@home"), Role::Lgw, None),
            NetOp::OpenAsgw(p) => {
                let p = ROUTE_PROVIDERS[p];
                self.open(&format!("sip:{p}@sp"), Role::Asgw, Some(p))
            }
            NetOp::Commission(i, k) => {
                if let Some(s) = self.pick(i, Some(Role::Lgw)) {
                    let name = if k % 2 == 0 {
                        format!("milk-{k}")
                    } else {
                        format!("heart-{k}")
                    };
                    self.control(
                        s,
                        ControlMessage::new(Verb::Commission).with(param::CTID, name),
                    );
                }
            }
            NetOp::Decommission(i, k) => {
                if let Some(s) = self.pick(i, None) {
                    let ctids: Vec<Ctid> = self.bound[&s].values().cloned().collect();
                    if !ctids.is_empty() {
                        let c = &ctids[k % ctids.len()];
                        self.control(
                            s,
                            ControlMessage::new(Verb::Decommission).with(param::CTID, c),
                        );
                    }
                }
            }
            NetOp::Lose(i) => {
                if let Some(s) = self.pick(i, None) {
                    let acts = self.ic.close_session(s, self.now, LossCause::TransportLost);
                    self.apply(acts);
                }
            }
        }
        self.pump();
    }

    /// The peer of (src, wire): the one opposite-role session holding the
    /// same ctid.
    fn oracle(&self, src: SessionId, wire: WireId) -> Result<Option<(SessionId, WireId)>, String> {
        let Some(c) = self.bound.get(&src).and_then(|b| b.get(&wire)) else {
            return Ok(None);
        };
        let role = self.roles[&src];
        let peers: Vec<_> = self
            .bound
            .iter()
            .filter(|(s, _)| **s != src && self.roles[*s] != role)
            .flat_map(|(s, b)| {
                b.iter()
                    .filter(|(_, x)| *x == c)
                    .map(move |(w, _)| (*s, *w))
            })
            .collect();
        match peers.as_slice() {
            [] => Ok(None),
            [one] => Ok(Some(*one)),
            many => Err(format!("{c} bound on {many:?}")),
        }
    }
}

fn route_oracle() -> Result<usize, String> {
    let routed = std::cell::Cell::new(0usize);
    let ops = proptest::collection::vec(net_op(), 1..60);
    let result = runner(ROUTE_TABLE_CASES).run(&ops, |ops| {
        let mut net = Net::new();
        for op in ops {
            net.step(op);
            for (&s, wires) in &net.bound {
                let top = wires.keys().map(|w| w.0).max().unwrap_or(0) + 2;
                for w in (0..=top).map(WireId) {
                    let want = net.oracle(s, w).map_err(TestCaseError::fail)?;
                    prop_assert_eq!(
                        net.ic.route_target(s, w),
                        want,
                        "session {:?} wire {}",
                        s,
                        w
                    );
                    if want.is_some() {
                        routed.set(routed.get() + 1);
                    }
                }
            }
        }
        Ok(())
    });
    result.map(|_| routed.get()).map_err(|e| e.to_string())
}

fn routing_oracle() -> Verdict {
    match (directory_oracle(), route_oracle()) {
        (Ok(resolved), Ok(routed)) => check(
            resolved > 0 && routed > 0,
            format!(
                "{ROUTING_PAIRS} directory pairs match longest-prefix ({resolved} resolved); {ROUTE_TABLE_CASES} wire tables match ({routed} routed lookups)"
            ),
        ),
        (d, r) => fail(format!("directory: {:?}; routes: {:?}", d.err(), r.err())),
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Invite,
    Ack,
    Bye,
    OkInvite,
    OkBye,
    ErrInvite,
}

const KINDS: [Kind; 6] = [
    Kind::Invite,
    Kind::Ack,
    Kind::Bye,
    Kind::OkInvite,
    Kind::OkBye,
    Kind::ErrInvite,
];

fn offer() -> SessionOffer {
    SessionOffer {
        security: Security::Plain,
        max_frame_size: 16384,
        payload_endpoint: "127.0.0.1:1".into(),
        role: Role::Lgw,
        provider: None,
    }
}

fn message(kind: Kind, session: &Session) -> SignalMessage {
    let ok = || SignalStart::Response {
        status: 200,
        reason: "OK".into(),
    };
    let (start, cseq, body) = match kind {
        Kind::Invite => (
            SignalStart::Request(Method::Invite),
            CSeq {
                seq: 1,
                method: Method::Invite,
            },
            Some(offer()),
        ),
        Kind::Ack => (
            SignalStart::Request(Method::Ack),
            CSeq {
                seq: 1,
                method: Method::Ack,
            },
            None,
        ),
        Kind::Bye => (
            SignalStart::Request(Method::Bye),
            CSeq {
                seq: 9,
                method: Method::Bye,
            },
            None,
        ),
        Kind::OkInvite => (
            ok(),
            CSeq {
                seq: 1,
                method: Method::Invite,
            },
            Some(offer()),
        ),
        Kind::OkBye => (
            ok(),
            CSeq {
                seq: session.local_cseq(),
                method: Method::Bye,
            },
            None,
        ),
        Kind::ErrInvite => (
            SignalStart::Response {
                status: 503,
                reason: "Service Unavailable".into(),
            },
            CSeq {
                seq: 1,
                method: Method::Invite,
            },
            None,
        ),
    };
    let call_id = if session.call_id.is_empty() {
        "new@gw".to_owned()
    } else {
        session.call_id.clone()
    };
    SignalMessage {
        start,
        from: "house".into(),
        to: BROKER_IDENTITY.into(),
        call_id,
        cseq,
        access: AccessType::Radio,
        body,
    }
}

fn outputs(actions: &[SignalAction]) -> Vec<String> {
    actions
        .iter()
        .map(|a| match a {
            SignalAction::Send(m) => match (&m.start, m.method()) {
                (SignalStart::Request(method), _) => method.as_str().to_owned(),
                (SignalStart::Response { status, .. }, _) => status.to_string(),
            },
            SignalAction::OpenPayloadChannel(_) => "open".into(),
            SignalAction::Established(_) => "established".into(),
            SignalAction::Rejected { .. } => "rejected".into(),
            SignalAction::Closed => "closed".into(),
        })
        .collect()
}

/// Every reachable state, from both sides of the dialog.
fn starting_points() -> Vec<Session> {
    let local = LocalParams {
        identity: BROKER_IDENTITY.into(),
        access: AccessType::Radio,
        max_frame_size: 16384,
        payload_endpoint: "127.0.0.1:2".into(),
    };
    let sent = |acts: &[SignalAction]| match &acts[0] {
        SignalAction::Send(m) => m.clone(),
        other => panic!("expected a send, got {other:?}"),
    };
    let mut factory = DialogFactory::new("acc");
    let (initiator, invite) = factory
        .make_invite("house", Role::Lgw, None, AccessType::Radio, offer(), "b", 0)
        .unwrap();
    let idle = Session::answering(local, "gw", 0);
    let (answerer, acts) = on_signal(&idle, &invite, 1);
    let (initiator_up, acts) = on_signal(&initiator, &sent(&acts), 2);
    let (answerer_up, _) = on_signal(&answerer, &sent(&acts), 3);
    let (initiator_closing, _) = initiator_up.start_bye(4).unwrap();
    let (answerer_closing, _) = answerer_up.start_bye(4).unwrap();
    let (initiator_closed, _) = on_signal(&initiator_up, &message(Kind::Bye, &initiator_up), 5);
    let (answerer_closed, _) = on_signal(&answerer_up, &message(Kind::Bye, &answerer_up), 5);
    vec![
        idle,
        initiator,
        answerer,
        initiator_up,
        answerer_up,
        initiator_closing,
        answerer_closing,
        initiator_closed,
        answerer_closed,
    ]
}

fn table(state: SessionState, kind: Kind) -> (SessionState, &'static [&'static str]) {
    use SessionState::*;
    match (state, kind) {
        (Idle, Kind::Invite) => (InviteReceived, &["200"]),
        (Idle, Kind::Bye) => (Idle, &["481"]),
        (Idle, _) => (Idle, &[]),
        (InviteSent, Kind::Invite) => (InviteSent, &["481"]),
        (InviteSent, Kind::Bye) => (Closed, &["200", "closed"]),
        (InviteSent, Kind::OkInvite) => (Established, &["ACK", "open"]),
        (InviteSent, Kind::ErrInvite) => (Closed, &["rejected", "closed"]),
        (InviteSent, _) => (InviteSent, &[]),
        (InviteReceived, Kind::Invite) => (InviteReceived, &["481"]),
        (InviteReceived, Kind::Ack) => (Established, &["established"]),
        (InviteReceived, Kind::Bye) => (Closed, &["200", "closed"]),
        (InviteReceived, _) => (InviteReceived, &[]),
        (Established, Kind::Invite) => (Established, &["481"]),
        (Established, Kind::Bye) => (Closed, &["200", "closed"]),
        (Established, _) => (Established, &[]),
        (Closing, Kind::Invite) => (Closing, &["481"]),
        (Closing, Kind::Bye) => (Closed, &["200", "closed"]),
        (Closing, Kind::OkBye) => (Closed, &["closed"]),
        (Closing, _) => (Closing, &[]),
        (Closed, Kind::Invite) => (Closed, &["481"]),
        (Closed, Kind::Bye) => (Closed, &["200"]),
        (Closed, _) => (Closed, &[]),
    }
}

fn state_machine() -> Verdict {
    let mut mismatches = Vec::new();
    let mut states = HashSet::new();
    let mut cells = 0;
    for session in starting_points() {
        states.insert(session.state);
        for kind in KINDS {
            let (next, actions) = on_signal(&session, &message(kind, &session), 100);
            let (want, want_out) = table(session.state, kind);
            let out = outputs(&actions);
            if next.state != want || out != want_out {
                mismatches.push(format!(
                    "{:?}+{kind:?} -> {:?} {out:?}",
                    session.state, next.state
                ));
            }
            cells += 1;
        }
    }
    // Closed absorbs every sequence of messages.
    let closed: Vec<Session> = starting_points()
        .into_iter()
        .filter(|s| s.state == SessionState::Closed)
        .collect();
    let absorbing = runner(500)
        .run(&proptest::collection::vec(0..KINDS.len(), 1..20), |seq| {
            for start in &closed {
                let mut s = start.clone();
                for k in &seq {
                    s = on_signal(&s, &message(KINDS[*k], &s), 200).0;
                    prop_assert_eq!(s.state, SessionState::Closed);
                }
            }
            Ok(())
        })
        .is_ok();
    let all_states: BTreeSet<_> = SessionState::ALL.iter().map(|s| format!("{s:?}")).collect();
    let seen: BTreeSet<_> = states.iter().map(|s| format!("{s:?}")).collect();
    check(
        mismatches.is_empty() && absorbing && seen == all_states,
        format!(
            "{cells} cells over {} states x {} kinds, mismatches={} closed_absorbing={absorbing} {}",
            seen.len(),
            KINDS.len(),
            mismatches.len(),
            mismatches.join("; ")
        ),
    )
}

async fn guarded<F>(f: F) -> Verdict
where
    F: Future<Output = Verdict> + Send + 'static,
{
    tokio::spawn(f)
        .await
        .unwrap_or_else(|e| fail(format!("panicked: {e}")))
}

async fn blocking(f: fn() -> Verdict) -> Verdict {
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| fail(format!("panicked: {e}")))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn acceptance_criteria() {
    let mut results = Vec::new();
    let mut record = |n: usize, title: &str, v: Verdict| {
        let line = format!(
            "criterion {n} ({title}): {} {}",
            if v.ok { "PASS" } else { "FAIL" },
            v.detail.trim_end()
        );
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        results.push((n, v.ok));
    };
    record(1, "wire lifecycle latency", guarded(wire_lifecycle()).await);
    record(2, "transfer latency", guarded(transfer()).await);
    record(3, "clean shutdown", guarded(clean_shutdown()).await);
    record(4, "watchdog", guarded(watchdog()).await);
    record(5, "access switch", guarded(access_switch()).await);
    record(6, "AS migration zero loss", guarded(as_migration()).await);
    record(7, "codec properties", blocking(codec_properties).await);
    record(8, "routing oracle", blocking(routing_oracle).await);
    record(9, "state machine totality", blocking(state_machine).await);
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
