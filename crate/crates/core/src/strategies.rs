//! Proptest generators for protocol values, shared by the test suites.

use bytes::Bytes;
use proptest::collection::vec;
use proptest::prelude::*;

use crate::wire::{
    AccessType, CSeq, ControlMessage, Ctid, DeliveryReport, Frame, Method, ReportStatus, Role,
    Security, SessionOffer, SignalMessage, SignalStart, TxnId, Verb, WireId, WirePacket,
    MAX_FRAME_SIZE, MIN_FRAME_SIZE,
};

pub fn ctid() -> impl Strategy<Value = Ctid> {
    "[A-Za-z0-9._-]{1,64}".prop_map(|s| Ctid::new(s).unwrap())
}

pub fn txn() -> impl Strategy<Value = TxnId> {
    "[A-Za-z0-9._-]{8,32}".prop_map(|s| TxnId::new(s).unwrap())
}

pub fn bearer_wire() -> impl Strategy<Value = WireId> {
    (1u32..=u32::MAX).prop_map(WireId)
}

/// Payloads biased toward the bytes that matter for framing.
pub fn payload(max: usize) -> impl Strategy<Value = Bytes> {
    let tricky = prop_oneof![
        Just(b'\r'),
        Just(b'\n'),
        Just(b'M'),
        Just(b':'),
        Just(b' '),
        Just(0u8),
        any::<u8>(),
    ];
    prop_oneof![
        vec(tricky, 0..max.min(300)).prop_map(Bytes::from),
        Just(Bytes::from_static(
            b"\r\n\r\nMSBC SEND t0000000a\r\nWire: 1\r\n\r\n"
        )),
    ]
}

fn header_value() -> impl Strategy<Value = String> {
    "[ -~]{0,40}"
}

fn header_key() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_.-]{1,16}".prop_filter("reserved key", |k| k != "Verb")
}

pub fn wire_packet() -> impl Strategy<Value = WirePacket> {
    (txn(), bearer_wire(), any::<u64>(), payload(4096)).prop_map(|(txn, wire, seq, payload)| {
        WirePacket {
            txn,
            wire,
            seq,
            payload,
        }
    })
}

pub fn report() -> impl Strategy<Value = DeliveryReport> {
    let status = prop_oneof![Just(200u16), Just(480), Just(481), 100u16..=999];
    (txn(), bearer_wire(), any::<u64>(), status).prop_map(|(txn, wire, seq, code)| DeliveryReport {
        txn,
        wire,
        seq,
        status: ReportStatus::from_code(code),
    })
}

pub fn control() -> impl Strategy<Value = ControlMessage> {
    let verb = proptest::sample::select(Verb::ALL.to_vec());
    (
        verb,
        ctid(),
        bearer_wire(),
        vec((header_key(), header_value()), 0..5),
    )
        .prop_map(|(verb, ctid, wire, extra)| {
            let mut msg = ControlMessage::new(verb);
            if verb.requires_ctid() {
                msg.set("Ctid", &ctid);
            }
            if verb.requires_wire() {
                msg.set("Wire", wire);
            }
            for (k, v) in extra {
                if k == "Ctid" || k == "Wire" {
                    continue;
                }
                msg.set(&k, v);
            }
            msg
        })
}

pub fn offer() -> impl Strategy<Value = SessionOffer> {
    (
        prop_oneof![Just(Security::Plain), Just(Security::Secure)],
        MIN_FRAME_SIZE as u32..=MAX_FRAME_SIZE as u32,
        "[a-z0-9.]{1,20}:[0-9]{1,5}",
        prop_oneof![Just(Role::Lgw), Just(Role::Asgw)],
        proptest::option::of("[a-z][a-z0-9-]{0,15}"),
    )
        .prop_map(
            |(security, max_frame_size, payload_endpoint, role, provider)| {
                let provider = match role {
                    Role::Asgw => Some(provider.unwrap_or_else(|| "health".into())),
                    Role::Lgw => provider,
                };
                SessionOffer {
                    security,
                    max_frame_size,
                    payload_endpoint,
                    role,
                    provider,
                }
            },
        )
}

pub fn access() -> impl Strategy<Value = AccessType> {
    prop_oneof![Just(AccessType::Radio), Just(AccessType::Internet)]
}

pub fn signal() -> impl Strategy<Value = SignalMessage> {
    let start = prop_oneof![
        Just(SignalStart::Request(Method::Invite)),
        Just(SignalStart::Request(Method::Ack)),
        Just(SignalStart::Request(Method::Bye)),
        (prop_oneof![Just(200u16), 100u16..=699], "[ -~]{0,20}")
            .prop_map(|(status, reason)| SignalStart::Response { status, reason }),
    ];
    let method = prop_oneof![Just(Method::Invite), Just(Method::Ack), Just(Method::Bye)];
    (
        start,
        "[a-z:@.0-9-]{1,30}",
        "[a-z:@.0-9-]{1,30}",
        "[A-Za-z0-9.-]{1,40}",
        any::<u32>(),
        method,
        access(),
        offer(),
    )
        .prop_map(
            |(start, from, to, call_id, seq, resp_method, access, offer)| {
                let cseq_method = match &start {
                    SignalStart::Request(m) => *m,
                    SignalStart::Response { .. } => resp_method,
                };
                let needs_body = match &start {
                    SignalStart::Request(m) => *m == Method::Invite,
                    SignalStart::Response { status, .. } => {
                        *status == 200 && cseq_method == Method::Invite
                    }
                };
                SignalMessage {
                    start,
                    from,
                    to,
                    call_id,
                    cseq: CSeq {
                        seq,
                        method: cseq_method,
                    },
                    access,
                    body: needs_body.then_some(offer),
                }
            },
        )
}

pub fn frame() -> impl Strategy<Value = Frame> {
    prop_oneof![
        wire_packet().prop_map(Frame::Send),
        report().prop_map(Frame::Report),
        (txn(), control()).prop_map(|(t, c)| Frame::Control(t, c)),
        (txn(), signal()).prop_map(|(t, s)| Frame::Signal(t, s)),
    ]
}

/// Rule sets over a tiny alphabet so prefixes and exact rules collide often.
/// Yields `(patterns, provider ids)`; each pattern maps to a provider index.
pub fn rule_set() -> impl Strategy<Value = Vec<(String, usize)>> {
    let pattern = prop_oneof![
        "[ab]{1,4}".prop_map(|s| s),
        "[ab]{0,3}".prop_map(|s| format!("{s}*")),
    ];
    vec((pattern, 0usize..4), 0..16)
}

/// CTIDs drawn from the same alphabet as [`rule_set`].
pub fn small_ctid() -> impl Strategy<Value = Ctid> {
    "[abc]{1,5}".prop_map(|s| Ctid::new(s).unwrap())
}

/// Runs INVITE / 200 / ACK through the real state machine and returns the
/// broker-side session, Established at `now`.
pub fn established_session(
    subscriber: &str,
    role: Role,
    provider: Option<&str>,
    access: AccessType,
    now: u64,
) -> crate::session::Session {
    use crate::session::{
        on_signal, DialogFactory, LocalParams, Session, SessionState, SignalAction,
    };

    let offer = SessionOffer {
        security: Security::Plain,
        max_frame_size: crate::wire::DEFAULT_FRAME_SIZE as u32,
        payload_endpoint: "127.0.0.1:1".into(),
        role,
        provider: provider.map(str::to_owned),
    };
    let mut factory =
        DialogFactory::new(subscriber.replace(|c: char| !c.is_ascii_alphanumeric(), ""));
    let (gw, invite) = factory
        .make_invite(
            subscriber,
            role,
            provider,
            access,
            offer,
            "127.0.0.1:2",
            now,
        )
        .expect("valid invite");
    let local = LocalParams {
        identity: crate::session::BROKER_IDENTITY.into(),
        access: AccessType::Radio,
        max_frame_size: crate::wire::DEFAULT_FRAME_SIZE as u32,
        payload_endpoint: "127.0.0.1:2".into(),
    };
    let broker = Session::answering(local, "127.0.0.1:1", now);
    let sent = |actions: Vec<SignalAction>| {
        actions
            .into_iter()
            .find_map(|a| match a {
                SignalAction::Send(m) => Some(m),
                _ => None,
            })
            .expect("a signal to send")
    };
    let (broker, acts) = on_signal(&broker, &invite, now);
    let (_, acts) = on_signal(&gw, &sent(acts), now);
    let (broker, _) = on_signal(&broker, &sent(acts), now);
    assert_eq!(broker.state, SessionState::Established);
    broker
}
