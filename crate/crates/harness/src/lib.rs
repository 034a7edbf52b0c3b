//! Scenario harness for MSBC.
//!
//! A [`Scenario`] is a text file of steps run in order against a fresh
//! in-process broker and gateways; [`run_scenario`] returns the
//! [`MetricsReport`] plus the broker event log and final state. Faults are
//! injected through the gateways' links, so the broker only ever sees
//! protocol behavior.
//!
//! [`smart_home`] builds the house-and-five-providers topology.

mod probe;
mod report;
mod runner;
mod scenario;
pub mod smart_home;
pub mod steps;

use thiserror::Error;

pub use probe::Probe;
pub use report::{Distribution, MetricsReport, Summary};
pub use runner::{
    comparable_log, run_scenario, until, Entity, EventLog, Fault, GatewayView, RunResult, Runtime,
    ScenarioFailed, TIMER_SLACK_MS,
};
pub use scenario::{Args, ParseError, Scenario, ScenarioStep, Settings};
pub use steps::{Step, StepRegistry, StepVerb};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("{0}: {1}")]
    Parse(String, ParseError),
    #[error("unknown target {0}")]
    UnknownTarget(String),
    #[error("fault on {0}: {1}")]
    Fault(String, String),
    #[error("cannot start {0}: {1}")]
    Startup(String, String),
}
