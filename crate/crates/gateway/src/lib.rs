//! Gateway SDK for MSBC.
//!
//! One [`Gateway`] is one gateway process toward the broker, in either role:
//! a local gateway (LGW) that attaches devices and transmits their data, or
//! an application service gateway (ASGW) that authorizes devices for its
//! provider and talks back to them.
//!
//! [`Gateway::open`] resolves once the dialog is up and the payload channel
//! is attached; that is the readiness signal. Afterwards the gateway keeps
//! the session alive, and on loss reconnects with backoff (if
//! `auto_reconnect`) and re-attaches every device it had attached.
//!
//! Receiver callbacks run on the gateway's connection task, one at a time,
//! so callbacks for a ctid arrive in delivery order. They must not block.

mod config;
mod gateway;
pub mod link;
pub mod security;

use bytes::Bytes;
use msbc_core::wire::Ctid;
use thiserror::Error;

pub use config::{Backoff, GatewayConfig};
pub use gateway::{Gateway, GatewayStats, ReconnectOptions};
pub use link::Link;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("connect failed: {0}")]
    ConnectFailed(String),
    #[error("rejected by broker: {status} {reason}")]
    Rejected { status: u16, reason: String },
    #[error("gateway is not open")]
    NotOpen,
    #[error("operation not available to this gateway role")]
    WrongRole,
    #[error("{0} is not commissioned")]
    NotCommissioned(Ctid),
    #[error("{0} is already attached")]
    AlreadyAttached(Ctid),
    #[error("payload of {len} bytes exceeds the negotiated {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("connection lost")]
    ConnectionLost,
    #[error("another connection attempt is in progress")]
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GatewayState {
    Closed,
    Connecting,
    Open,
    /// Connection lost; reconnecting or waiting for [`Gateway::reconnect`].
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GatewayEvent {
    Commissioned(Ctid),
    Denied(Ctid),
    ProviderUnavailable(Ctid),
    PeerDown(Ctid),
    PeerUp(Ctid),
    Decommissioned(Ctid),
    ConnectionLost,
    ConnectionRestored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Authorization {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttachOutcome {
    Commissioned,
    Denied,
    ProviderUnavailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DeliveryOutcome {
    Delivered,
    PeerUnavailable,
    NoWire,
    /// No report within the configured timeout.
    TimedOut,
}

pub trait Receiver: Send + Sync + 'static {
    fn on_data(&self, ctid: &Ctid, data: Bytes);

    fn on_event(&self, _event: GatewayEvent) {}

    /// ASGW only: called once per authorization request from the broker.
    fn authorize(&self, _ctid: &Ctid) -> Authorization {
        Authorization::Allow
    }
}
