//! Listener and per-connection tasks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use log::{debug, warn};
use msbc_core::interconnect::SessionId;
use msbc_core::wire::{param, Frame, FrameCodec, Verb, MAX_FRAME_SIZE};
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio_util::codec::Framed;

use crate::engine::{Attach, ConnId, Input};
use crate::security::AcceptorRegistry;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

static NEXT_CONN: AtomicU64 = AtomicU64::new(1);

/// Pumps frames between a transport and an outbox until either side ends.
/// Returns when the peer closes, a frame is malformed, `inbound` returns
/// false, or every outbox sender is dropped.
async fn pump<S, F>(
    mut framed: Framed<S, FrameCodec>,
    mut rx: mpsc::UnboundedReceiver<Frame>,
    mut inbound: F,
) where
    S: AsyncRead + AsyncWrite + Unpin,
    F: FnMut(Frame) -> bool,
{
    loop {
        tokio::select! {
            out = rx.recv() => {
                let Some(frame) = out else { break };
                if framed.feed(frame).await.is_err() {
                    break;
                }
                let mut ok = true;
                while let Ok(frame) = rx.try_recv() {
                    if framed.feed(frame).await.is_err() {
                        ok = false;
                        break;
                    }
                }
                if !ok || SinkExt::<Frame>::flush(&mut framed).await.is_err() {
                    break;
                }
            }
            read = framed.next() => match read {
                Some(Ok(frame)) => {
                    if !inbound(frame) {
                        break;
                    }
                }
                Some(Err(e)) => {
                    debug!("closing connection: {e}");
                    break;
                }
                None => break,
            }
        }
    }
}

pub(crate) async fn signaling_listener(
    listener: TcpListener,
    engine: mpsc::UnboundedSender<Input>,
) {
    loop {
        let (tcp, peer) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                warn!("signaling accept failed: {e}");
                continue;
            }
        };
        let _ = tcp.set_nodelay(true);
        let conn = ConnId(NEXT_CONN.fetch_add(1, Ordering::Relaxed));
        let (tx, rx) = mpsc::unbounded_channel();
        if engine
            .send(Input::SignalOpen {
                conn,
                peer,
                out: tx,
            })
            .is_err()
        {
            return;
        }
        let engine = engine.clone();
        tokio::spawn(async move {
            let framed = Framed::new(tcp, FrameCodec::new(MAX_FRAME_SIZE));
            pump(framed, rx, |frame| match frame {
                Frame::Signal(txn, msg) => engine.send(Input::Signal { conn, txn, msg }).is_ok(),
                other => {
                    debug!("{peer}: {} frame on signaling channel", other.kind());
                    false
                }
            })
            .await;
            let _ = engine.send(Input::SignalClosed { conn });
        });
    }
}

pub(crate) async fn payload_listener(
    listener: TcpListener,
    registry: Arc<AcceptorRegistry>,
    engine: mpsc::UnboundedSender<Input>,
) {
    loop {
        let (tcp, peer) = match listener.accept().await {
            Ok(c) => c,
            Err(e) => {
                warn!("payload accept failed: {e}");
                continue;
            }
        };
        let _ = tcp.set_nodelay(true);
        let registry = registry.clone();
        let engine = engine.clone();
        tokio::spawn(async move {
            match tokio::time::timeout(HANDSHAKE_TIMEOUT, attach(tcp, peer, &registry, &engine))
                .await
            {
                Ok(Some((session, framed, rx))) => {
                    let tx = engine.clone();
                    pump(framed, rx, |frame| {
                        tx.send(Input::Payload { session, frame }).is_ok()
                    })
                    .await;
                    let _ = engine.send(Input::PayloadClosed { session });
                }
                Ok(None) => {}
                Err(_) => debug!("{peer}: payload handshake timed out"),
            }
        });
    }
}

type Attached = (
    SessionId,
    Framed<crate::security::BoxedStream, FrameCodec>,
    mpsc::UnboundedReceiver<Frame>,
);

async fn attach(
    tcp: TcpStream,
    peer: std::net::SocketAddr,
    registry: &AcceptorRegistry,
    engine: &mpsc::UnboundedSender<Input>,
) -> Option<Attached> {
    let mut first = [0u8; 1];
    match tcp.peek(&mut first).await {
        Ok(1) => {}
        _ => return None,
    }
    let Some(strategy) = registry.select(first[0]) else {
        debug!(
            "{peer}: no channel strategy for first byte {:#04x}",
            first[0]
        );
        return None;
    };
    let stream = match strategy.accept(tcp).await {
        Ok(s) => s,
        Err(e) => {
            debug!("{peer}: {} handshake failed: {e}", strategy.security());
            return None;
        }
    };
    let mut framed = Framed::new(stream, FrameCodec::new(MAX_FRAME_SIZE));
    let (txn, call_id) = match framed.next().await {
        Some(Ok(Frame::Control(txn, msg))) if msg.verb == Verb::Attach => {
            (txn, msg.get(param::CALL_ID)?.to_owned())
        }
        _ => {
            debug!("{peer}: payload channel did not start with ATTACH");
            return None;
        }
    };
    let (tx, rx) = mpsc::unbounded_channel();
    let (reply, answer) = oneshot::channel();
    let request = Attach {
        call_id,
        txn,
        security: strategy.security(),
        peer,
        out: tx,
        reply,
    };
    engine.send(Input::Attach(request)).ok()?;
    let session = answer.await.ok()??;
    Some((session, framed, rx))
}
