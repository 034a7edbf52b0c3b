use bytes::Bytes;
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::strategy::ValueTree;

use msbc_core::strategies;
use msbc_core::wire::{
    decode_stream, encode_frame, parse_frame, ControlMessage, Ctid, Frame, TxnId, Verb, WireError,
    WireId, WirePacket, MAX_FRAME_SIZE,
};

/// Builds frame bytes by hand from the grammar, independently of the encoder.
fn assemble(kind: &str, txn: &str, headers: &[(&str, &str)], payload: Option<&[u8]>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"MSBC");
    out.push(b' ');
    out.extend_from_slice(kind.as_bytes());
    out.push(b' ');
    out.extend_from_slice(txn.as_bytes());
    out.extend_from_slice(&[13, 10]);
    for (k, v) in headers {
        out.extend_from_slice(k.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(v.as_bytes());
        out.extend_from_slice(&[13, 10]);
    }
    out.extend_from_slice(&[13, 10]);
    if let Some(p) = payload {
        out.extend_from_slice(p);
        out.extend_from_slice(&[13, 10]);
    }
    out
}

fn txn(s: &str) -> TxnId {
    TxnId::new(s).unwrap()
}

#[test]
fn ping_encodes_to_exact_bytes() {
    let frame = Frame::Control(
        txn("t00000001"),
        ControlMessage::new(Verb::Ping).with("Token", "a1"),
    );
    let oracle = assemble(
        "CONTROL",
        "t00000001",
        &[("Wire", "0"), ("Verb", "PING"), ("Token", "a1")],
        None,
    );
    let encoded = encode_frame(&frame).unwrap();
    assert_eq!(encoded, oracle);
    assert_eq!(
        encoded,
        b"MSBC CONTROL t00000001\r\nWire: 0\r\nVerb: PING\r\nToken: a1\r\n\r\n".to_vec()
    );
}

#[test]
fn empty_payload_send() {
    let frame = Frame::Send(WirePacket {
        txn: txn("t1t1t1t1"),
        wire: WireId(7),
        seq: 1,
        payload: Bytes::new(),
    });
    let encoded = encode_frame(&frame).unwrap();
    let oracle = assemble(
        "SEND",
        "t1t1t1t1",
        &[("Wire", "7"), ("Seq", "1"), ("Length", "0")],
        Some(b""),
    );
    assert_eq!(encoded, oracle);
    let (frames, used) = decode_stream(&encoded).unwrap();
    assert_eq!(frames, vec![frame]);
    assert_eq!(used, encoded.len());
}

#[test]
fn oversize_payload_is_invalid() {
    let frame = Frame::Send(WirePacket {
        txn: txn("t1t1t1t1"),
        wire: WireId(1),
        seq: 1,
        payload: Bytes::from(vec![0u8; MAX_FRAME_SIZE + 1]),
    });
    assert!(matches!(
        encode_frame(&frame),
        Err(WireError::PayloadTooLarge { .. })
    ));
}

#[test]
fn control_invariants_enforced_on_encode() {
    let missing_ctid = Frame::Control(txn("t00000002"), ControlMessage::new(Verb::Commission));
    assert!(matches!(
        encode_frame(&missing_ctid),
        Err(WireError::MissingParam(Verb::Commission, "Ctid"))
    ));
    let bad_ctid = Frame::Control(
        txn("t00000002"),
        ControlMessage::new(Verb::Commission).with("Ctid", "no spaces"),
    );
    assert!(encode_frame(&bad_ctid).is_err());
    let missing_wire = Frame::Control(
        txn("t00000002"),
        ControlMessage::new(Verb::Commissioned).with("Ctid", "milk-1"),
    );
    assert!(matches!(
        encode_frame(&missing_wire),
        Err(WireError::MissingParam(Verb::Commissioned, "Wire"))
    ));
}

#[test]
fn send_on_service_wire_is_rejected() {
    let frame = Frame::Send(WirePacket {
        txn: txn("t1t1t1t1"),
        wire: WireId::SERVICE,
        seq: 1,
        payload: Bytes::from_static(b"x"),
    });
    assert_eq!(encode_frame(&frame), Err(WireError::ServiceWireFrame));
    let raw = assemble(
        "SEND",
        "t1t1t1t1",
        &[("Wire", "0"), ("Seq", "1"), ("Length", "1")],
        Some(b"x"),
    );
    assert!(decode_stream(&raw).is_err());
}

#[test]
fn control_on_nonzero_wire_is_rejected() {
    let raw = assemble(
        "CONTROL",
        "t00000001",
        &[("Wire", "3"), ("Verb", "PING")],
        None,
    );
    let err = decode_stream(&raw).unwrap_err();
    assert!(err.reason.contains("Wire: 0"), "{err}");
}

#[test]
fn concatenated_frames_decode_in_order() {
    let f1 = Frame::Control(txn("t00000001"), ControlMessage::new(Verb::Ping));
    let f2 = Frame::Send(WirePacket {
        txn: txn("t00000002"),
        wire: WireId(3),
        seq: 9,
        payload: Bytes::from_static(b"\r\n\r\n"),
    });
    let mut stream = encode_frame(&f1).unwrap();
    stream.extend(encode_frame(&f2).unwrap());
    let (frames, used) = decode_stream(&stream).unwrap();
    assert_eq!(frames, vec![f1, f2]);
    assert_eq!(used, stream.len());
}

#[test]
fn truncated_frame_consumes_nothing() {
    let frame = Frame::Send(WirePacket {
        txn: txn("t00000002"),
        wire: WireId(3),
        seq: 9,
        payload: Bytes::from_static(b"reading=72bpm"),
    });
    let bytes = encode_frame(&frame).unwrap();
    for cut in 0..bytes.len() {
        let (frames, used) = decode_stream(&bytes[..cut]).unwrap();
        assert!(frames.is_empty(), "cut {cut}");
        assert_eq!(used, 0);
    }
}

#[test]
fn unknown_send_headers_are_ignored() {
    let raw = assemble(
        "SEND",
        "t00000003",
        &[
            ("Wire", "4"),
            ("To", "asgw-of-my-choice"),
            ("Seq", "2"),
            ("Length", "2"),
        ],
        Some(b"hi"),
    );
    let (frames, _) = decode_stream(&raw).unwrap();
    assert_eq!(
        frames,
        vec![Frame::Send(WirePacket {
            txn: txn("t00000003"),
            wire: WireId(4),
            seq: 2,
            payload: Bytes::from_static(b"hi"),
        })]
    );
}

#[test]
fn malformed_inputs_report_offsets() {
    let cases: &[(&[u8], usize)] = &[
        (b"GET / HTTP/1.1\r\n", 0),
        (b"MSBC SEND t00000001\nWire: 1", 19),
        (b"MSBC SEND t00000001\r\nWire: 1\rX", 28),
        (b"MSBC JUNK t00000001\r\n\r\n", 5),
        (b"MSBC SEND short\r\n\r\n", 0),
        (b"MSBC REPORT t00000001\r\nWire 1\r\n\r\n", 23),
        (
            b"MSBC SEND t00000001\r\nWire: 1\r\nSeq: 1\r\nLength: 2\r\n\r\nabXY",
            53,
        ),
    ];
    for (input, offset) in cases {
        let err = decode_stream(input).unwrap_err();
        assert_eq!(
            err.offset,
            *offset,
            "{:?}: {err}",
            String::from_utf8_lossy(input)
        );
    }
}

#[test]
fn declared_length_above_limit_is_rejected_before_payload_arrives() {
    let raw = b"MSBC SEND t00000001\r\nWire: 1\r\nSeq: 1\r\nLength: 1048577\r\n\r\n";
    assert!(decode_stream(raw).is_err());
    let raw = b"MSBC SEND t00000001\r\nWire: 1\r\nSeq: 1\r\nLength: 100\r\n\r\n";
    assert!(parse_frame(raw, 64).is_err());
    assert_eq!(parse_frame(raw, 100).unwrap(), None);
}

#[test]
fn header_without_terminator_eventually_fails() {
    let mut raw = b"MSBC SEND t00000001\r\nWire: ".to_vec();
    raw.extend(std::iter::repeat_n(b'1', 2000));
    assert!(decode_stream(&raw).is_err());
}

#[test]
fn ctid_param_survives_roundtrip() {
    let ctid = Ctid::new("heart-007").unwrap();
    let frame = Frame::Control(
        txn("t00000010"),
        ControlMessage::new(Verb::Commissioned)
            .with("Ctid", &ctid)
            .with("Wire", 5),
    );
    let (frames, _) = decode_stream(&encode_frame(&frame).unwrap()).unwrap();
    let Frame::Control(_, msg) = &frames[0] else {
        panic!("expected control")
    };
    assert_eq!(msg.ctid(), Some(ctid));
    assert_eq!(msg.wire(), Some(WireId(5)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn roundtrip_identity(frame in strategies::frame()) {
        let bytes = encode_frame(&frame).unwrap();
        let (frames, used) = decode_stream(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(frames, vec![frame]);
    }

    #[test]
    fn encoding_is_deterministic(frame in strategies::frame()) {
        prop_assert_eq!(encode_frame(&frame).unwrap(), encode_frame(&frame.clone()).unwrap());
    }

    #[test]
    fn chunked_parse_matches_whole(
        frames in vec(strategies::frame(), 1..8),
        cuts in vec(any::<prop::sample::Index>(), 0..12),
    ) {
        let stream: Vec<u8> = frames.iter().flat_map(|f| encode_frame(f).unwrap()).collect();
        let (whole, used) = decode_stream(&stream).unwrap();
        prop_assert_eq!(used, stream.len());

        let mut points: Vec<usize> = cuts.iter().map(|i| i.index(stream.len() + 1)).collect();
        points.push(stream.len());
        points.sort_unstable();
        let mut buffer = Vec::new();
        let mut fed = 0;
        let mut incremental = Vec::new();
        for point in points {
            buffer.extend_from_slice(&stream[fed..point]);
            fed = point;
            let (got, consumed) = decode_stream(&buffer).unwrap();
            incremental.extend(got);
            buffer.drain(..consumed);
        }
        prop_assert!(buffer.is_empty());
        prop_assert_eq!(incremental, whole);
    }

    #[test]
    fn binary_payloads_roundtrip(payload in vec(any::<u8>(), 0..2048)) {
        let mut payload = payload;
        payload.extend_from_slice(b"\r\n\r\nMSBC REPORT t00000001\r\n\r\n");
        let frame = Frame::Send(WirePacket {
            txn: txn("t00000001"),
            wire: WireId(1),
            seq: 1,
            payload: Bytes::from(payload),
        });
        let bytes = encode_frame(&frame).unwrap();
        let (frames, _) = decode_stream(&bytes).unwrap();
        prop_assert_eq!(frames, vec![frame]);
    }
}

#[test]
fn byte_at_a_time_matches_whole() {
    let mut runner = proptest::test_runner::TestRunner::default();
    for _ in 0..64 {
        let frames = vec(strategies::frame(), 1..5)
            .new_tree(&mut runner)
            .unwrap()
            .current();
        let stream: Vec<u8> = frames
            .iter()
            .flat_map(|f| encode_frame(f).unwrap())
            .collect();
        let mut buffer = Vec::new();
        let mut out = Vec::new();
        for b in &stream {
            buffer.push(*b);
            let (got, used) = decode_stream(&buffer).unwrap();
            out.extend(got);
            buffer.drain(..used);
        }
        assert_eq!(out, frames);
    }
}

/// xorshift64*, so the fuzz corpus is reproducible without extra crates.
struct Rng(u64);

impl Rng {
    fn next(&mut self) -> u64 {
        self.0 ^= self.0 >> 12;
        self.0 ^= self.0 << 25;
        self.0 ^= self.0 >> 27;
        self.0.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }
}

#[test]
fn fuzz_random_bytes_never_panic() {
    let seeds: Vec<Vec<u8>> = vec![
        b"MSBC SEND t00000001\r\nWire: 1\r\nSeq: 1\r\nLength: 3\r\n\r\nabc\r\n".to_vec(),
        b"MSBC CONTROL t00000001\r\nWire: 0\r\nVerb: PING\r\n\r\n".to_vec(),
        b"MSBC REPORT t00000001\r\nWire: 1\r\nSeq: 1\r\nStatus: 200\r\n\r\n".to_vec(),
    ];
    let mut rng = Rng(0x9E37_79B9_7F4A_7C15);
    let mut outcomes = [0usize; 2];
    for i in 0..100_000 {
        let input: Vec<u8> = if i % 2 == 0 {
            let len = (rng.next() % 96) as usize;
            let mut v: Vec<u8> = (0..len).map(|_| rng.next() as u8).collect();
            if i % 4 == 0 {
                let mut prefixed = b"MSBC ".to_vec();
                prefixed.append(&mut v);
                v = prefixed;
            }
            v
        } else {
            let mut v = seeds[(rng.next() % 3) as usize].clone();
            for _ in 0..1 + rng.next() % 3 {
                let at = (rng.next() as usize) % v.len();
                v[at] = rng.next() as u8;
            }
            v
        };
        match decode_stream(&input) {
            Ok((_, used)) => {
                assert!(used <= input.len());
                outcomes[0] += 1;
            }
            Err(err) => {
                assert!(err.offset <= input.len());
                outcomes[1] += 1;
            }
        }
    }
    assert!(outcomes[1] > 0);
}
