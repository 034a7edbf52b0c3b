//! MSBC broker runtime.
//!
//! [`Broker::start`] binds the signaling and payload listeners and spawns the
//! engine task that owns the [`Interconnect`]. Gateways dial the signaling
//! endpoint, negotiate a dialog, then open the payload channel announced in
//! the answer and bind it with `ATTACH`.

mod conn;
mod engine;
pub mod security;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use msbc_core::directory::{DirectoryError, SubscriptionDirectory};
use msbc_core::interconnect::{BrokerConfig, Event, Interconnect, Limits, SessionId, WireState};
use msbc_core::wire::{AccessType, Ctid, Role, Security, WireId};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;

use engine::{Engine, Input};
use security::{AcceptorRegistry, TlsIdentity};

const EVENT_CAPACITY: usize = 1 << 16;

/// How often the engine checks keepalive deadlines. A silent session is
/// declared expired at most one tick after its deadline.
pub fn tick_period_ms(keepalive_interval_ms: u64) -> u64 {
    (keepalive_interval_ms / 4).max(10)
}

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("cannot bind {0}: {1}")]
    Bind(String, std::io::Error),
    #[error("tls: {0}")]
    Tls(String),
    #[error(transparent)]
    Directory(#[from] DirectoryError),
    #[error("broker stopped")]
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionView {
    pub id: SessionId,
    pub subscriber: String,
    pub role: Role,
    pub provider: Option<String>,
    pub access: AccessType,
    pub security: Security,
    pub remote_endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryView {
    pub ctid: Ctid,
    pub provider: String,
    pub state: WireState,
    pub lgw: (SessionId, WireId),
    pub asgw: Option<(SessionId, WireId)>,
    pub buffered_packets: usize,
    pub awaiting_ack: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub at: u64,
    pub sessions: Vec<SessionView>,
    pub entries: Vec<EntryView>,
    /// Signaling dialogs, attached or not.
    pub dialogs: usize,
    pub in_flight: usize,
    pub quarantined: usize,
}

impl Snapshot {
    pub fn entry(&self, ctid: &str) -> Option<&EntryView> {
        self.entries.iter().find(|e| e.ctid.as_str() == ctid)
    }

    pub fn session_of(&self, subscriber: &str) -> Option<&SessionView> {
        self.sessions.iter().find(|s| s.subscriber == subscriber)
    }
}

/// Handle to a running broker. Dropping it stops the broker.
pub struct Broker {
    signaling: SocketAddr,
    payload: SocketAddr,
    identity: TlsIdentity,
    input: mpsc::UnboundedSender<Input>,
    events: broadcast::Sender<Event>,
    epoch: Instant,
    tasks: Vec<JoinHandle<()>>,
}

impl Broker {
    /// Binds both listeners and starts serving. Must run inside a tokio
    /// runtime.
    pub async fn start(config: BrokerConfig) -> Result<Broker, BrokerError> {
        let directory = match &config.directory_path {
            Some(path) => SubscriptionDirectory::load(path)?,
            None => SubscriptionDirectory::new(),
        };
        Self::start_with(config, directory).await
    }

    /// Like [`Broker::start`] with an in-memory directory; `directory_path`
    /// is ignored.
    pub async fn start_with(
        config: BrokerConfig,
        directory: SubscriptionDirectory,
    ) -> Result<Broker, BrokerError> {
        let identity = match (&config.tls_cert, &config.tls_key) {
            (Some(cert), Some(key)) => TlsIdentity::load(cert, key)?,
            (None, None) => TlsIdentity::generate()?,
            _ => return Err(BrokerError::Tls("tls_cert and tls_key go together".into())),
        };
        let registry = Arc::new(AcceptorRegistry::with_defaults(&identity)?);

        let bind = |addr: String| async move {
            TcpListener::bind(&addr)
                .await
                .map_err(|e| BrokerError::Bind(addr, e))
        };
        let signaling = bind(config.signaling_endpoint.clone()).await?;
        let payload = bind(config.payload_endpoint.clone()).await?;
        let signaling_addr = signaling
            .local_addr()
            .map_err(|e| BrokerError::Bind("signaling".into(), e))?;
        let payload_addr = payload
            .local_addr()
            .map_err(|e| BrokerError::Bind("payload".into(), e))?;

        let epoch = Instant::now();
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        let (input, rx) = mpsc::unbounded_channel();
        let ic = Interconnect::new(Limits::from(&config), directory);
        let engine = Engine::new(
            ic,
            config.max_frame_size,
            payload_addr.to_string(),
            epoch,
            events.clone(),
        );
        let tasks = vec![
            tokio::spawn(engine.run(rx)),
            tokio::spawn(conn::signaling_listener(signaling, input.clone())),
            tokio::spawn(conn::payload_listener(payload, registry, input.clone())),
        ];
        log::info!("signaling on {signaling_addr}, payload on {payload_addr}");
        Ok(Broker {
            signaling: signaling_addr,
            payload: payload_addr,
            identity,
            input,
            events,
            epoch,
            tasks,
        })
    }

    pub fn signaling_addr(&self) -> SocketAddr {
        self.signaling
    }

    pub fn payload_addr(&self) -> SocketAddr {
        self.payload
    }

    /// DER of the certificate served on secure payload channels.
    pub fn certificate(&self) -> &[u8] {
        self.identity.cert.as_ref()
    }

    pub fn certificate_pem(&self) -> &str {
        self.identity.cert_pem()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Event> {
        self.events.subscribe()
    }

    /// Milliseconds on the event log clock.
    pub fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    pub async fn snapshot(&self) -> Result<Snapshot, BrokerError> {
        let (tx, rx) = oneshot::channel();
        self.input
            .send(Input::Snapshot(tx))
            .map_err(|_| BrokerError::Stopped)?;
        rx.await.map_err(|_| BrokerError::Stopped)
    }

    /// Replaces the routing directory. Existing wires keep their provider.
    pub async fn set_directory(&self, directory: SubscriptionDirectory) -> Result<(), BrokerError> {
        let (tx, rx) = oneshot::channel();
        self.input
            .send(Input::SetDirectory(directory, tx))
            .map_err(|_| BrokerError::Stopped)?;
        rx.await.map_err(|_| BrokerError::Stopped)
    }

    /// Stops listening and drops every connection.
    pub async fn shutdown(mut self) {
        for task in self.tasks.drain(..) {
            task.abort();
            let _ = task.await;
        }
    }
}

impl Drop for Broker {
    fn drop(&mut self) {
        for task in &self.tasks {
            task.abort();
        }
    }
}
