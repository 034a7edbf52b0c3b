use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use log::{debug, info, warn};
use msbc_core::session::{on_signal, DialogFactory, Session, SessionState, SignalAction};
use msbc_core::wire::{
    param, AccessType, ControlMessage, Ctid, DeliveryReport, Frame, FrameCodec, ReportStatus, Role,
    Security, SessionOffer, SignalMessage, TxnGenerator, TxnId, Verb, WireId, WirePacket,
    MAX_FRAME_SIZE,
};
use rand::Rng;
use tokio::sync::{mpsc, oneshot};
use tokio_util::codec::Framed;

use crate::link::{FaultStream, Link};
use crate::security::{BoxedStream, SecurityRegistry};
use crate::{
    AttachOutcome, Authorization, DeliveryOutcome, GatewayConfig, GatewayError, GatewayEvent,
    GatewayState, Receiver,
};

type Outbox = mpsc::UnboundedSender<Frame>;

/// Changes applied by [`Gateway::reconnect_with`].
#[derive(Debug, Clone, Default)]
pub struct ReconnectOptions {
    pub access: Option<AccessType>,
    pub local_address: Option<IpAddr>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub received: u64,
    /// Inbound packets whose seq was not one past the previous on that wire.
    pub seq_gaps: u64,
    pub sessions: u64,
}

/// PING token of the barrier sent before BYE.
const FLUSH_TOKEN: &str = "flush";

struct Device {
    wire: Option<WireId>,
    next_seq: u64,
}

struct Conn {
    payload: Outbox,
    signal: Outbox,
    max_frame: usize,
    security: Security,
    local_addr: SocketAddr,
}

struct Shared {
    state: GatewayState,
    generation: u64,
    connecting: bool,
    conn: Option<Conn>,
    session: Option<Session>,
    access: AccessType,
    local_address: Option<IpAddr>,
    devices: BTreeMap<Ctid, Device>,
    wires: HashMap<WireId, Ctid>,
    last_seq: HashMap<WireId, u64>,
    commissions: HashMap<Ctid, Vec<oneshot::Sender<AttachOutcome>>>,
    detaches: HashMap<Ctid, Vec<oneshot::Sender<()>>>,
    pending: HashMap<TxnId, oneshot::Sender<DeliveryOutcome>>,
    bye: Option<oneshot::Sender<()>>,
    flush: Option<oneshot::Sender<()>>,
    txns: TxnGenerator,
    dialogs: DialogFactory,
    stats: GatewayStats,
}

impl Shared {
    fn next_txn(&mut self) -> TxnId {
        self.txns.next_txn()
    }

    fn send_control(&mut self, msg: ControlMessage) {
        let txn = self.next_txn();
        if let Some(conn) = &self.conn {
            let _ = conn.payload.send(Frame::Control(txn, msg));
        }
    }

    fn unbind(&mut self, ctid: &Ctid, wire: WireId) -> bool {
        self.wires.remove(&wire);
        self.last_seq.remove(&wire);
        match self.devices.get(ctid) {
            Some(d) if d.wire == Some(wire) => {
                self.devices.remove(ctid);
                true
            }
            _ => false,
        }
    }

    /// Drops the connection and everything bound to it. Devices stay in the
    /// attached set with no wire.
    fn drop_connection(&mut self) {
        self.generation += 1;
        self.conn = None;
        self.session = None;
        self.wires.clear();
        self.last_seq.clear();
        for device in self.devices.values_mut() {
            device.wire = None;
        }
        for (_, tx) in self.pending.drain() {
            let _ = tx.send(DeliveryOutcome::PeerUnavailable);
        }
        self.commissions.clear();
        self.detaches.clear();
        self.bye = None;
        self.flush = None;
    }
}

struct Inner {
    config: GatewayConfig,
    receiver: Arc<dyn Receiver>,
    link: Link,
    security: SecurityRegistry,
    shared: Mutex<Shared>,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap()
    }
}

/// Handle to one gateway. Clones share the same connection.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

/// Callbacks collected under the lock and run after it is released.
enum Notify {
    Data(Ctid, Bytes),
    Event(GatewayEvent),
}

impl Gateway {
    /// Connects and attaches. One attempt; backoff applies to reconnects.
    pub async fn open(
        config: GatewayConfig,
        receiver: Arc<dyn Receiver>,
    ) -> Result<Gateway, GatewayError> {
        Self::open_on(config, receiver, Link::new()).await
    }

    /// Like [`Gateway::open`] over a caller-supplied link.
    pub async fn open_on(
        config: GatewayConfig,
        receiver: Arc<dyn Receiver>,
        link: Link,
    ) -> Result<Gateway, GatewayError> {
        config.validate()?;
        let tag: u64 = rand::thread_rng().gen();
        let shared = Shared {
            state: GatewayState::Closed,
            generation: 0,
            connecting: false,
            conn: None,
            session: None,
            access: config.access,
            local_address: config.local_address,
            devices: BTreeMap::new(),
            wires: HashMap::new(),
            last_seq: HashMap::new(),
            commissions: HashMap::new(),
            detaches: HashMap::new(),
            pending: HashMap::new(),
            bye: None,
            flush: None,
            txns: TxnGenerator::new(),
            dialogs: DialogFactory::new(format!("{tag:016x}")),
            stats: GatewayStats::default(),
        };
        let gateway = Gateway {
            inner: Arc::new(Inner {
                security: SecurityRegistry::with_defaults(config.trusted_certificate.as_deref()),
                config,
                receiver,
                link,
                shared: Mutex::new(shared),
            }),
        };
        gateway.connect(false).await?;
        Ok(gateway)
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.inner.config
    }

    pub fn state(&self) -> GatewayState {
        self.inner.lock().state
    }

    pub fn link(&self) -> Link {
        self.inner.link.clone()
    }

    pub fn session(&self) -> Option<Session> {
        self.inner.lock().session.clone()
    }

    pub fn security(&self) -> Option<Security> {
        self.inner.lock().conn.as_ref().map(|c| c.security)
    }

    pub fn access(&self) -> AccessType {
        self.inner.lock().access
    }

    /// Local address of the current signaling connection.
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.inner.lock().conn.as_ref().map(|c| c.local_addr)
    }

    pub fn max_frame_size(&self) -> Option<usize> {
        self.inner.lock().conn.as_ref().map(|c| c.max_frame)
    }

    /// LGW: every attached device, commissioned or not. ASGW: every
    /// authorized device.
    pub fn devices(&self) -> Vec<Ctid> {
        self.inner.lock().devices.keys().cloned().collect()
    }

    /// Devices that currently have a wire.
    pub fn commissioned(&self) -> Vec<Ctid> {
        let shared = self.inner.lock();
        shared
            .devices
            .iter()
            .filter(|(_, d)| d.wire.is_some())
            .map(|(c, _)| c.clone())
            .collect()
    }

    pub fn wire_of(&self, ctid: &Ctid) -> Option<WireId> {
        self.inner.lock().devices.get(ctid).and_then(|d| d.wire)
    }

    pub fn stats(&self) -> GatewayStats {
        self.inner.lock().stats.clone()
    }

    /// LGW: asks the broker for a wire for `ctid`.
    pub async fn attach_device(&self, ctid: &Ctid) -> Result<AttachOutcome, GatewayError> {
        if self.inner.config.role != Role::Lgw {
            return Err(GatewayError::WrongRole);
        }
        let rx = {
            let mut shared = self.inner.lock();
            if shared.state != GatewayState::Open {
                return Err(GatewayError::NotOpen);
            }
            if shared.devices.contains_key(ctid) {
                return Err(GatewayError::AlreadyAttached(ctid.clone()));
            }
            shared.devices.insert(
                ctid.clone(),
                Device {
                    wire: None,
                    next_seq: 0,
                },
            );
            let (tx, rx) = oneshot::channel();
            shared.commissions.entry(ctid.clone()).or_default().push(tx);
            shared.send_control(ControlMessage::new(Verb::Commission).with(param::CTID, ctid));
            rx
        };
        rx.await.map_err(|_| GatewayError::ConnectionLost)
    }

    /// Releases the wire of `ctid` and forgets the device. Waits for the
    /// broker's confirmation up to the handshake timeout.
    pub async fn detach_device(&self, ctid: &Ctid) -> Result<(), GatewayError> {
        let rx = {
            let mut shared = self.inner.lock();
            let Some(device) = shared.devices.get(ctid) else {
                return Err(GatewayError::NotCommissioned(ctid.clone()));
            };
            if device.wire.is_none() || shared.state != GatewayState::Open {
                shared.devices.remove(ctid);
                return Ok(());
            }
            let (tx, rx) = oneshot::channel();
            shared.detaches.entry(ctid.clone()).or_default().push(tx);
            shared.send_control(ControlMessage::new(Verb::Decommission).with(param::CTID, ctid));
            rx
        };
        let _ = tokio::time::timeout(self.inner.config.handshake_timeout, rx).await;
        self.inner.lock().devices.remove(ctid);
        Ok(())
    }

    /// Sends `data` on the wire of `ctid` and waits for the end-to-end
    /// report.
    pub async fn transmit(
        &self,
        ctid: &Ctid,
        data: impl Into<Bytes>,
    ) -> Result<DeliveryOutcome, GatewayError> {
        let data = data.into();
        let (txn, rx) = {
            let mut shared = self.inner.lock();
            if shared.state != GatewayState::Open {
                return Err(GatewayError::NotOpen);
            }
            let max = shared.conn.as_ref().map_or(0, |c| c.max_frame);
            let Some(device) = shared.devices.get_mut(ctid) else {
                return Err(GatewayError::NotCommissioned(ctid.clone()));
            };
            let Some(wire) = device.wire else {
                return Err(GatewayError::NotCommissioned(ctid.clone()));
            };
            if data.len() > max {
                return Err(GatewayError::FrameTooLarge {
                    len: data.len(),
                    max,
                });
            }
            device.next_seq += 1;
            let seq = device.next_seq;
            let txn = shared.next_txn();
            let (tx, rx) = oneshot::channel();
            shared.pending.insert(txn.clone(), tx);
            let frame = Frame::Send(WirePacket {
                txn: txn.clone(),
                wire,
                seq,
                payload: data,
            });
            if let Some(conn) = &shared.conn {
                let _ = conn.payload.send(frame);
            }
            (txn, rx)
        };
        match tokio::time::timeout(self.inner.config.report_timeout, rx).await {
            Ok(Ok(outcome)) => Ok(outcome),
            Ok(Err(_)) => Ok(DeliveryOutcome::PeerUnavailable),
            Err(_) => {
                self.inner.lock().pending.remove(&txn);
                Ok(DeliveryOutcome::TimedOut)
            }
        }
    }

    /// Decommissions every device (LGW), ends the dialog and drops the
    /// connection. Idempotent.
    pub async fn close(&self) {
        let timeout = self.inner.config.handshake_timeout;
        let waiters = {
            let mut shared = self.inner.lock();
            match shared.state {
                GatewayState::Closed => return,
                GatewayState::Open => {}
                GatewayState::Connecting | GatewayState::Degraded => {
                    shared.drop_connection();
                    shared.devices.clear();
                    shared.state = GatewayState::Closed;
                    return;
                }
            }
            shared.state = GatewayState::Closed;
            let mut waiters = Vec::new();
            if self.inner.config.role == Role::Lgw {
                let bound: Vec<Ctid> = shared
                    .devices
                    .iter()
                    .filter(|(_, d)| d.wire.is_some())
                    .map(|(c, _)| c.clone())
                    .collect();
                for ctid in bound {
                    let (tx, rx) = oneshot::channel();
                    shared.detaches.entry(ctid.clone()).or_default().push(tx);
                    shared.send_control(
                        ControlMessage::new(Verb::Decommission).with(param::CTID, &ctid),
                    );
                    waiters.push(rx);
                }
            }
            waiters
        };
        let _ = tokio::time::timeout(timeout, futures::future::join_all(waiters)).await;

        // The BYE travels on the signaling connection; a PING round trip on
        // the payload connection first makes sure the broker has processed
        // every teardown ack sent before it.
        let flushed = {
            let mut shared = self.inner.lock();
            let (tx, rx) = oneshot::channel();
            shared.flush = Some(tx);
            shared.send_control(ControlMessage::new(Verb::Ping).with(param::TOKEN, FLUSH_TOKEN));
            rx
        };
        let _ = tokio::time::timeout(timeout, flushed).await;

        let bye = {
            let mut shared = self.inner.lock();
            let bye = shared.session.as_ref().and_then(|s| s.start_bye(0));
            match bye {
                Some((next, msg)) => {
                    shared.session = Some(next);
                    let (tx, rx) = oneshot::channel();
                    shared.bye = Some(tx);
                    let txn = shared.next_txn();
                    if let Some(conn) = &shared.conn {
                        let _ = conn.signal.send(Frame::Signal(txn, msg));
                    }
                    Some(rx)
                }
                None => None,
            }
        };
        if let Some(rx) = bye {
            let _ = tokio::time::timeout(timeout, rx).await;
        }
        let mut shared = self.inner.lock();
        shared.drop_connection();
        shared.devices.clear();
        shared.state = GatewayState::Closed;
    }

    /// Drops the connection without BYE or DECOMMISSION, as if the process
    /// died: the broker sees the transport close. The gateway ends Closed.
    pub fn abort(&self) {
        let mut shared = self.inner.lock();
        shared.drop_connection();
        shared.devices.clear();
        shared.state = GatewayState::Closed;
    }

    /// New dialog after a loss, re-attaching every device.
    pub async fn reconnect(&self) -> Result<(), GatewayError> {
        self.reconnect_with(ReconnectOptions::default()).await
    }

    /// Reconnects with a different access type or local address. On an
    /// open gateway the current transport is abandoned without BYE, as when
    /// a device switches networks.
    pub async fn reconnect_with(&self, options: ReconnectOptions) -> Result<(), GatewayError> {
        {
            let mut shared = self.inner.lock();
            if shared.state == GatewayState::Closed {
                return Err(GatewayError::NotOpen);
            }
            if shared.connecting {
                return Err(GatewayError::Busy);
            }
            if let Some(access) = options.access {
                shared.access = access;
            }
            if options.local_address.is_some() {
                shared.local_address = options.local_address;
            }
            if shared.state == GatewayState::Open {
                self.inner.link.sever();
                shared.drop_connection();
                shared.state = GatewayState::Degraded;
            }
        }
        let result = self.connect(true).await;
        if result.is_err()
            && self.inner.config.auto_reconnect
            && self.state() == GatewayState::Degraded
        {
            self.spawn_reconnect();
        }
        result
    }

    async fn connect(&self, restoring: bool) -> Result<(), GatewayError> {
        let (access, local) = {
            let mut shared = self.inner.lock();
            if shared.connecting {
                return Err(GatewayError::Busy);
            }
            shared.connecting = true;
            if shared.state != GatewayState::Degraded {
                shared.state = GatewayState::Connecting;
            }
            (shared.access, shared.local_address)
        };
        let result = self.handshake(access, local).await;
        let mut shared = self.inner.lock();
        shared.connecting = false;
        let established = match result {
            Ok(established) => established,
            Err(e) => {
                if shared.state == GatewayState::Connecting {
                    shared.state = GatewayState::Closed;
                }
                return Err(e);
            }
        };
        if shared.state == GatewayState::Closed && restoring {
            return Err(GatewayError::NotOpen);
        }
        let Established {
            session,
            signal,
            payload,
            max_frame,
            security,
            local_addr,
        } = established;
        let (payload_tx, payload_rx) = mpsc::unbounded_channel();
        let (signal_tx, signal_rx) = mpsc::unbounded_channel();
        shared.generation += 1;
        let generation = shared.generation;
        shared.conn = Some(Conn {
            payload: payload_tx,
            signal: signal_tx,
            max_frame,
            security,
            local_addr,
        });
        shared.session = Some(session);
        shared.state = GatewayState::Open;
        shared.stats.sessions += 1;
        info!(
            "{} open from {local_addr} ({security} channel)",
            self.inner.config.subscriber
        );
        let reattach: Vec<Ctid> = if self.inner.config.role == Role::Lgw {
            shared.devices.keys().cloned().collect()
        } else {
            shared.devices.clear();
            Vec::new()
        };
        drop(shared);

        let driver = Driver {
            gateway: self.clone(),
            generation,
        };
        tokio::spawn(driver.run(signal, payload, signal_rx, payload_rx));
        if restoring {
            self.inner
                .receiver
                .on_event(GatewayEvent::ConnectionRestored);
            let mut shared = self.inner.lock();
            for ctid in reattach {
                shared.send_control(ControlMessage::new(Verb::Commission).with(param::CTID, &ctid));
            }
        }
        Ok(())
    }

    async fn handshake(
        &self,
        access: AccessType,
        local: Option<IpAddr>,
    ) -> Result<Established, GatewayError> {
        let config = &self.inner.config;
        let limit = config.handshake_timeout;
        let failed = |what: &str, e: &dyn std::fmt::Display| {
            GatewayError::ConnectFailed(format!("{what}: {e}"))
        };

        let addr = tokio::net::lookup_host(&config.broker_signaling_endpoint)
            .await
            .map_err(|e| failed("resolve", &e))?
            .next()
            .ok_or_else(|| failed("resolve", &"no address"))?;
        let stream = self
            .inner
            .link
            .connect(addr, local)
            .await
            .map_err(|e| failed("signaling", &e))?;
        let local_addr = stream.local_addr().map_err(|e| failed("signaling", &e))?;
        let mut signal = Framed::new(stream, FrameCodec::new(MAX_FRAME_SIZE));

        let offer = SessionOffer {
            security: if access == AccessType::Internet {
                Security::Secure
            } else {
                Security::Plain
            },
            max_frame_size: config.max_frame_size,
            payload_endpoint: local_addr.to_string(),
            role: config.role,
            provider: config.provider.clone(),
        };
        let (session, invite, txn) = {
            let mut shared = self.inner.lock();
            let (session, invite) = shared
                .dialogs
                .make_invite(
                    &config.subscriber,
                    config.role,
                    config.provider.as_deref(),
                    access,
                    offer,
                    &addr.to_string(),
                    0,
                )
                .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
            (session, invite, shared.next_txn())
        };
        signal
            .send(Frame::Signal(txn, invite))
            .await
            .map_err(|e| failed("signaling", &e))?;

        let (mut session, channel, ack) = loop {
            let msg = match tokio::time::timeout(limit, signal.next()).await {
                Err(_) => return Err(failed("signaling", &"no answer")),
                Ok(Some(Ok(Frame::Signal(_, msg)))) => msg,
                Ok(Some(Ok(_))) => continue,
                Ok(Some(Err(e))) => return Err(failed("signaling", &e)),
                Ok(None) => return Err(failed("signaling", &"closed by broker")),
            };
            let (next, actions) = on_signal(&session, &msg, 0);
            let mut ack = None;
            let mut channel = None;
            for action in actions {
                match action {
                    SignalAction::Send(m) => ack = Some(m),
                    SignalAction::OpenPayloadChannel(c) => channel = Some(c),
                    SignalAction::Rejected { status, reason } => {
                        return Err(GatewayError::Rejected { status, reason })
                    }
                    _ => {}
                }
            }
            if let (Some(c), Some(a)) = (channel, ack) {
                break (next, c, a);
            }
        };
        let txn = self.inner.lock().next_txn();
        signal
            .send(Frame::Signal(txn, ack))
            .await
            .map_err(|e| failed("signaling", &e))?;

        let payload_addr: SocketAddr = channel
            .payload_endpoint
            .parse()
            .map_err(|e| failed("payload endpoint", &e))?;
        let strategy = self
            .inner
            .security
            .get(channel.security)
            .ok_or_else(|| failed("payload", &format!("no {} strategy", channel.security)))?;
        let tcp = self
            .inner
            .link
            .connect(payload_addr, local)
            .await
            .map_err(|e| failed("payload", &e))?;
        let stream =
            tokio::time::timeout(limit, strategy.wrap(tcp, &payload_addr.ip().to_string()))
                .await
                .map_err(|_| failed("payload", &"handshake timed out"))?
                .map_err(|e| failed("payload", &e))?;
        let mut payload = Framed::new(stream, FrameCodec::new(MAX_FRAME_SIZE));
        let attach = ControlMessage::new(Verb::Attach).with(param::CALL_ID, &session.call_id);
        let txn = self.inner.lock().next_txn();
        payload
            .send(Frame::Control(txn, attach))
            .await
            .map_err(|e| failed("attach", &e))?;
        match tokio::time::timeout(limit, payload.next()).await {
            Ok(Some(Ok(Frame::Control(_, msg)))) if msg.verb == Verb::Attached => {}
            Err(_) => return Err(failed("attach", &"no answer")),
            _ => return Err(failed("attach", &"refused")),
        }
        session.remote_endpoint = payload_addr.to_string();
        debug_assert_eq!(session.state, SessionState::Established);
        Ok(Established {
            max_frame: channel.max_frame_size as usize,
            security: channel.security,
            session,
            signal,
            payload,
            local_addr,
        })
    }

    fn spawn_reconnect(&self) {
        let gateway = self.clone();
        tokio::spawn(async move {
            let backoff = gateway.inner.config.reconnect_backoff;
            let mut attempt = 0;
            loop {
                tokio::time::sleep(backoff.delay(attempt)).await;
                if gateway.state() != GatewayState::Degraded {
                    return;
                }
                match gateway.connect(true).await {
                    Ok(()) | Err(GatewayError::NotOpen) => return,
                    Err(GatewayError::Busy) => {}
                    Err(e) => {
                        debug!("{}: reconnect failed: {e}", gateway.inner.config.subscriber);
                        attempt = attempt.saturating_add(1);
                    }
                }
            }
        });
    }
}

struct Established {
    session: Session,
    signal: Framed<FaultStream, FrameCodec>,
    payload: Framed<BoxedStream, FrameCodec>,
    max_frame: usize,
    security: Security,
    local_addr: SocketAddr,
}

struct Driver {
    gateway: Gateway,
    generation: u64,
}

impl Driver {
    async fn run(
        self,
        mut signal: Framed<FaultStream, FrameCodec>,
        mut payload: Framed<BoxedStream, FrameCodec>,
        mut signal_rx: mpsc::UnboundedReceiver<Frame>,
        mut payload_rx: mpsc::UnboundedReceiver<Frame>,
    ) {
        let config = &self.gateway.inner.config;
        let interval = config.keepalive_interval;
        let expiry = interval * config.keepalive_misses;
        let mut ticker = tokio::time::interval((interval / 4).max(Duration::from_millis(10)));
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let mut last_inbound = Instant::now();
        let mut last_ping = Instant::now();
        let mut pings = 0u64;
        let mut payload_open = true;

        let lost = loop {
            tokio::select! {
                out = payload_rx.recv() => {
                    let Some(frame) = out else { break false };
                    if payload.feed(frame).await.is_err() {
                        break true;
                    }
                    let mut ok = true;
                    while let Ok(frame) = payload_rx.try_recv() {
                        if payload.feed(frame).await.is_err() {
                            ok = false;
                            break;
                        }
                    }
                    if !ok || SinkExt::<Frame>::flush(&mut payload).await.is_err() {
                        break true;
                    }
                }
                out = signal_rx.recv() => {
                    let Some(frame) = out else { break false };
                    if signal.send(frame).await.is_err() {
                        break true;
                    }
                }
                read = payload.next(), if payload_open => match read {
                    Some(Ok(frame)) => {
                        last_inbound = Instant::now();
                        self.on_payload(frame);
                    }
                    Some(Err(e)) => {
                        warn!("{}: payload channel: {e}", config.subscriber);
                        break true;
                    }
                    // The broker drops the payload channel as soon as it
                    // takes our BYE; the 200 still has to be read.
                    None if self.gateway.inner.lock().bye.is_some() => payload_open = false,
                    None => break true,
                },
                read = signal.next() => match read {
                    Some(Ok(Frame::Signal(txn, msg))) => {
                        last_inbound = Instant::now();
                        if self.on_signal(txn, msg) {
                            break true;
                        }
                    }
                    Some(Ok(_)) | Some(Err(_)) | None => break true,
                },
                _ = ticker.tick() => {
                    let idle = last_inbound.elapsed();
                    if idle >= expiry {
                        info!("{}: keepalive expired", config.subscriber);
                        break true;
                    }
                    if idle >= interval && last_ping.elapsed() >= interval {
                        last_ping = Instant::now();
                        pings += 1;
                        let ping = ControlMessage::new(Verb::Ping).with(param::TOKEN, format!("g{pings}"));
                        let txn = self.gateway.inner.lock().next_txn();
                        if payload.send(Frame::Control(txn, ping)).await.is_err() {
                            break true;
                        }
                    }
                }
            }
        };
        if lost {
            self.connection_lost();
        }
    }

    fn current(&self, shared: &Shared) -> bool {
        shared.generation == self.generation
    }

    fn connection_lost(&self) {
        {
            let mut shared = self.gateway.inner.lock();
            if !self.current(&shared) || shared.state != GatewayState::Open {
                return;
            }
            shared.drop_connection();
            shared.state = GatewayState::Degraded;
        }
        warn!("{}: connection lost", self.gateway.inner.config.subscriber);
        self.gateway
            .inner
            .receiver
            .on_event(GatewayEvent::ConnectionLost);
        if self.gateway.inner.config.auto_reconnect {
            self.gateway.spawn_reconnect();
        }
    }

    /// Returns true if the broker ended the dialog.
    fn on_signal(&self, txn: TxnId, msg: SignalMessage) -> bool {
        let mut shared = self.gateway.inner.lock();
        if !self.current(&shared) {
            return false;
        }
        let Some(session) = shared.session.clone() else {
            return false;
        };
        let (next, actions) = on_signal(&session, &msg, 0);
        shared.session = Some(next);
        let mut ended = false;
        for action in actions {
            match action {
                SignalAction::Send(reply) => {
                    if let Some(conn) = &shared.conn {
                        let _ = conn.signal.send(Frame::Signal(txn.clone(), reply));
                    }
                }
                SignalAction::Closed => {
                    if let Some(tx) = shared.bye.take() {
                        let _ = tx.send(());
                    } else {
                        ended = true;
                    }
                }
                _ => {}
            }
        }
        ended
    }

    fn on_payload(&self, frame: Frame) {
        let inner = &self.gateway.inner;
        let mut notes = Vec::new();
        {
            let mut shared = inner.lock();
            if !self.current(&shared) {
                return;
            }
            match frame {
                Frame::Send(pkt) => self.on_packet(&mut shared, pkt, &mut notes),
                Frame::Report(report) => on_report(&mut shared, report),
                Frame::Control(_, msg) if msg.verb == Verb::Authorize => {
                    drop(shared);
                    self.on_authorize(msg);
                }
                Frame::Control(_, msg) => self.on_control(&mut shared, msg, &mut notes),
                Frame::Signal(..) => debug!("signal frame on payload channel ignored"),
            }
        }
        for note in notes {
            match note {
                Notify::Data(ctid, data) => inner.receiver.on_data(&ctid, data),
                Notify::Event(event) => inner.receiver.on_event(event),
            }
        }
    }

    fn on_packet(&self, shared: &mut Shared, pkt: WirePacket, notes: &mut Vec<Notify>) {
        let status = match shared.wires.get(&pkt.wire).cloned() {
            Some(ctid) => {
                let last = shared.last_seq.entry(pkt.wire).or_insert(0);
                if pkt.seq != *last + 1 {
                    shared.stats.seq_gaps += 1;
                }
                *last = pkt.seq;
                shared.stats.received += 1;
                notes.push(Notify::Data(ctid, pkt.payload));
                ReportStatus::Delivered
            }
            None => ReportStatus::NoSuchWire,
        };
        let report = Frame::Report(DeliveryReport {
            txn: pkt.txn,
            wire: pkt.wire,
            seq: pkt.seq,
            status,
        });
        if let Some(conn) = &shared.conn {
            let _ = conn.payload.send(report);
        }
    }

    fn on_authorize(&self, msg: ControlMessage) {
        let inner = &self.gateway.inner;
        let (Some(ctid), Some(wire)) = (msg.ctid(), msg.wire()) else {
            return;
        };
        if inner.config.role != Role::Asgw {
            return;
        }
        let decision = inner.receiver.authorize(&ctid);
        let mut shared = inner.lock();
        if !self.current(&shared) {
            return;
        }
        let verb = match decision {
            Authorization::Allow => {
                if let Some(old) = shared.devices.get(&ctid).and_then(|d| d.wire) {
                    shared.wires.remove(&old);
                }
                shared.devices.insert(
                    ctid.clone(),
                    Device {
                        wire: Some(wire),
                        next_seq: 0,
                    },
                );
                shared.wires.insert(wire, ctid.clone());
                shared.last_seq.remove(&wire);
                Verb::Authorized
            }
            Authorization::Deny => Verb::Denied,
        };
        shared.send_control(
            ControlMessage::new(verb)
                .with(param::CTID, &ctid)
                .with(param::WIRE, wire),
        );
    }

    fn on_control(&self, shared: &mut Shared, msg: ControlMessage, notes: &mut Vec<Notify>) {
        let role = self.gateway.inner.config.role;
        let ctid = msg.ctid();
        let wire = msg.wire();
        let event = |e: fn(Ctid) -> GatewayEvent, c: &Ctid| Notify::Event(e(c.clone()));
        match (msg.verb, ctid, wire) {
            (Verb::Ping, ..) => {
                let mut pong = ControlMessage::new(Verb::Pong);
                if let Some(token) = msg.get(param::TOKEN) {
                    pong.set(param::TOKEN, token);
                }
                shared.send_control(pong);
            }
            (Verb::Pong, ..) => {
                if msg.get(param::TOKEN) == Some(FLUSH_TOKEN) {
                    if let Some(tx) = shared.flush.take() {
                        let _ = tx.send(());
                    }
                }
            }
            (Verb::Commissioned, Some(ctid), Some(wire)) => {
                if role == Role::Lgw {
                    let Some(device) = shared.devices.get_mut(&ctid) else {
                        // Detached while pending: give the wire back.
                        shared.send_control(
                            ControlMessage::new(Verb::Decommission).with(param::CTID, &ctid),
                        );
                        return;
                    };
                    device.wire = Some(wire);
                    device.next_seq = 0;
                    shared.wires.insert(wire, ctid.clone());
                    resolve(&mut shared.commissions, &ctid, AttachOutcome::Commissioned);
                }
                notes.push(event(GatewayEvent::Commissioned, &ctid));
            }
            (Verb::Denied, Some(ctid), _) if role == Role::Lgw => {
                if shared.devices.get(&ctid).is_some_and(|d| d.wire.is_none()) {
                    shared.devices.remove(&ctid);
                }
                resolve(&mut shared.commissions, &ctid, AttachOutcome::Denied);
                notes.push(event(GatewayEvent::Denied, &ctid));
            }
            (Verb::Error, Some(ctid), _) => {
                let reason = msg.reason().unwrap_or("");
                let waiting = shared.devices.get(&ctid).is_some_and(|d| d.wire.is_none());
                match reason {
                    "provider-unavailable" | "duplicate" if waiting => {
                        shared.devices.remove(&ctid);
                        let (outcome, ev): (_, fn(Ctid) -> GatewayEvent) = if reason == "duplicate"
                        {
                            (AttachOutcome::Denied, GatewayEvent::Denied)
                        } else {
                            (
                                AttachOutcome::ProviderUnavailable,
                                GatewayEvent::ProviderUnavailable,
                            )
                        };
                        resolve(&mut shared.commissions, &ctid, outcome);
                        notes.push(event(ev, &ctid));
                    }
                    "unknown-ctid" => {
                        if let Some(waiters) = shared.detaches.remove(&ctid) {
                            for tx in waiters {
                                let _ = tx.send(());
                            }
                        }
                    }
                    _ => debug!("error for {ctid}: {reason}"),
                }
            }
            (Verb::Decommissioned | Verb::PeerDown, Some(ctid), Some(wire)) => {
                let removed = shared.unbind(&ctid, wire);
                shared.send_control(
                    ControlMessage::new(Verb::Decommissioned)
                        .with(param::CTID, &ctid)
                        .with(param::WIRE, wire),
                );
                if let Some(waiters) = shared.detaches.remove(&ctid) {
                    for tx in waiters {
                        let _ = tx.send(());
                    }
                }
                if removed {
                    let ev = if msg.verb == Verb::PeerDown {
                        GatewayEvent::PeerDown
                    } else {
                        GatewayEvent::Decommissioned
                    };
                    notes.push(event(ev, &ctid));
                }
            }
            (Verb::PeerUp, Some(ctid), _) => notes.push(event(GatewayEvent::PeerUp, &ctid)),
            (verb, ..) => debug!("ignoring {verb}"),
        }
    }
}

fn on_report(shared: &mut Shared, report: DeliveryReport) {
    let Some(tx) = shared.pending.remove(&report.txn) else {
        return;
    };
    let outcome = match report.status {
        ReportStatus::Delivered => DeliveryOutcome::Delivered,
        ReportStatus::NoSuchWire => DeliveryOutcome::NoWire,
        ReportStatus::PeerUnavailable | ReportStatus::Other(_) => DeliveryOutcome::PeerUnavailable,
    };
    let _ = tx.send(outcome);
}

fn resolve(
    waiters: &mut HashMap<Ctid, Vec<oneshot::Sender<AttachOutcome>>>,
    ctid: &Ctid,
    outcome: AttachOutcome,
) {
    for tx in waiters.remove(ctid).unwrap_or_default() {
        let _ = tx.send(outcome);
    }
}
