//! Core of the MSBC machine-to-machine session network.
//!
//! * [`wire`]: frame types and the text codec shared by every component.
//! * [`session`]: the signaling dialog state machine and channel negotiation.
//! * [`directory`]: CTID to provider resolution and its file format.
//! * [`interconnect`]: the broker's wire table and source-based router.
//!
//! Nothing in this crate performs I/O or reads a clock; time is always
//! passed in as milliseconds.

pub mod directory;
pub mod interconnect;
pub mod session;
pub mod wire;

#[cfg(feature = "strategies")]
pub mod strategies;
