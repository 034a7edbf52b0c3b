use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use bytes::Bytes;
use msbc_broker::{Broker, Snapshot};
use msbc_core::directory::SubscriptionDirectory;
use msbc_core::interconnect::{Event, EventKind, SessionId};
use msbc_core::wire::{AccessType, Ctid, Role, Security};
use msbc_gateway::{
    DeliveryOutcome, Gateway, GatewayConfig, GatewayEvent, GatewayState, GatewayStats,
    ReconnectOptions,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::sync::broadcast;
use tokio::task::JoinHandle;

use crate::probe::Probe;
use crate::report::MetricsReport;
use crate::scenario::{Scenario, Settings};
use crate::HarnessError;

const EXCERPT_LINES: usize = 200;
const POLL: Duration = Duration::from_millis(1);
/// Allowance for timer wakeups and millisecond clock rounding on top of the
/// keepalive deadline and tick period.
pub const TIMER_SLACK_MS: u64 = 10;

/// Broker events in emission order, filled by a subscriber task.
#[derive(Clone, Default)]
pub struct EventLog {
    events: Arc<Mutex<Vec<Event>>>,
    lagged: Arc<AtomicU64>,
}

impl EventLog {
    fn follow(&self, mut rx: broadcast::Receiver<Event>) -> JoinHandle<()> {
        let log = self.clone();
        tokio::spawn(async move {
            loop {
                match rx.recv().await {
                    Ok(e) => log.events.lock().unwrap().push(e),
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        log.lagged.fetch_add(n, Ordering::Relaxed);
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        })
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn since(&self, idx: usize) -> Vec<Event> {
        self.events.lock().unwrap()[idx..].to_vec()
    }

    pub fn all(&self) -> Vec<Event> {
        self.since(0)
    }

    pub fn lagged(&self) -> u64 {
        self.lagged.load(Ordering::Relaxed)
    }
}

/// Outcome counters shared with background transmissions. `in_flight` is
/// counted on its own rather than derived, so the conservation check means
/// something.
#[derive(Default)]
struct Counts {
    sent: u64,
    delivered: u64,
    lost: u64,
    in_flight: u64,
    rtt: Vec<f64>,
}

type Ledger = Mutex<Counts>;

pub struct Entity {
    pub gateway: Gateway,
    pub probe: Arc<Probe>,
}

impl Entity {
    pub fn role(&self) -> Role {
        self.gateway.config().role
    }
}

struct Kill {
    at_ms: u64,
    session: Option<SessionId>,
}

pub enum Fault {
    /// Transport goes silent: no FIN, no BYE.
    KillLink,
    /// Transport closes without BYE.
    KillProcess,
    /// Reconnect from a new local address and/or access type.
    SwitchEndpoint(ReconnectOptions),
}

/// What a gateway looked like when the scenario ended.
#[derive(Debug, Clone)]
pub struct GatewayView {
    pub role: Role,
    pub subscriber: String,
    pub state: GatewayState,
    pub access: AccessType,
    pub security: Option<Security>,
    pub local_addr: Option<SocketAddr>,
    pub commissioned: Vec<Ctid>,
    pub events: Vec<GatewayEvent>,
    pub stats: GatewayStats,
}

#[derive(Debug)]
pub struct RunResult {
    pub report: MetricsReport,
    pub events: Vec<Event>,
    /// Broker state after the last step, before the harness tears down.
    pub snapshot: Option<Snapshot>,
    pub gateways: BTreeMap<String, GatewayView>,
    /// Payloads each gateway transmitted, per ctid, in order.
    pub sent: BTreeMap<(String, Ctid), Vec<Bytes>>,
    pub received: BTreeMap<(String, Ctid), Vec<Bytes>>,
}

#[derive(Debug)]
pub struct ScenarioFailed {
    pub scenario: String,
    pub line: usize,
    pub step: String,
    pub expectation: String,
    /// Tail of the broker event log at the time of failure.
    pub log: Vec<String>,
    pub report: MetricsReport,
}

impl fmt::Display for ScenarioFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "scenario {} failed at line {} `{}`: {}",
            self.scenario, self.line, self.step, self.expectation
        )?;
        writeln!(f, "event log ({} lines):", self.log.len())?;
        for line in &self.log {
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioFailed {}

/// Everything a running scenario owns.
pub struct Runtime {
    pub settings: Settings,
    pub directory: SubscriptionDirectory,
    broker: Option<Broker>,
    log: EventLog,
    collector: Option<JoinHandle<()>>,
    gateways: BTreeMap<String, Entity>,
    report: MetricsReport,
    ledger: Arc<Ledger>,
    rng: ChaCha8Rng,
    sent: BTreeMap<(String, Ctid), Vec<Bytes>>,
    background: Vec<JoinHandle<()>>,
    kills: Vec<Kill>,
    last_kill: Option<Instant>,
}

/// Polls `cond` every millisecond until it holds or `within` runs out.
pub async fn until(within: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let start = Instant::now();
    loop {
        if cond() {
            return true;
        }
        if start.elapsed() >= within {
            return false;
        }
        tokio::time::sleep(POLL).await;
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

impl Runtime {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        Runtime {
            settings: scenario.settings.clone(),
            directory: scenario.directory.clone(),
            broker: None,
            log: EventLog::default(),
            collector: None,
            gateways: BTreeMap::new(),
            report: MetricsReport::new(&scenario.name),
            ledger: Arc::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            sent: BTreeMap::new(),
            background: Vec::new(),
            kills: Vec::new(),
            last_kill: None,
        }
    }

    pub async fn start_broker(&mut self) -> Result<(), String> {
        if self.broker.is_some() {
            return Err("broker already running".into());
        }
        let broker = Broker::start_with(self.settings.broker.clone(), self.directory.clone())
            .await
            .map_err(|e| format!("broker: {e}"))?;
        self.collector = Some(self.log.follow(broker.subscribe()));
        self.broker = Some(broker);
        Ok(())
    }

    pub fn broker(&self) -> Result<&Broker, String> {
        self.broker
            .as_ref()
            .ok_or_else(|| "broker not started".into())
    }

    pub async fn snapshot(&self) -> Result<Snapshot, String> {
        self.broker()?.snapshot().await.map_err(|e| e.to_string())
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    /// Gateway config wired to the running broker and the scenario's
    /// keepalive and report settings.
    pub fn gateway_config(
        &self,
        role: Role,
        subscriber: &str,
        provider: Option<&str>,
    ) -> Result<GatewayConfig, String> {
        let broker = self.broker()?;
        let endpoint = broker.signaling_addr().to_string();
        let mut config = match role {
            Role::Lgw => GatewayConfig::lgw(subscriber, endpoint),
            Role::Asgw => GatewayConfig::asgw(
                subscriber,
                provider.ok_or("asgw needs provider=<id>")?,
                endpoint,
            ),
        };
        config.trusted_certificate = Some(broker.certificate().to_vec());
        config.keepalive_interval =
            Duration::from_millis(self.settings.broker.keepalive_interval_ms);
        config.keepalive_misses = self.settings.broker.keepalive_misses;
        config.report_timeout = self.settings.report_timeout;
        Ok(config)
    }

    pub async fn start_gateway(
        &mut self,
        name: &str,
        config: GatewayConfig,
        probe: Arc<Probe>,
    ) -> Result<(), String> {
        if self.gateways.contains_key(name) {
            return Err(format!("gateway {name} already started"));
        }
        let gateway = Gateway::open(config, probe.clone())
            .await
            .map_err(|e| format!("{name}: {e}"))?;
        self.gateways
            .insert(name.to_owned(), Entity { gateway, probe });
        Ok(())
    }

    pub fn entity(&self, name: &str) -> Result<&Entity, HarnessError> {
        self.gateways
            .get(name)
            .ok_or_else(|| HarnessError::UnknownTarget(name.to_owned()))
    }

    pub fn gateway(&self, name: &str) -> Result<Gateway, String> {
        Ok(self
            .entity(name)
            .map_err(|e| e.to_string())?
            .gateway
            .clone())
    }

    pub fn entities(&self) -> impl Iterator<Item = (&String, &Entity)> {
        self.gateways.iter()
    }

    /// Open ASGW entity serving `provider`, most recently started first.
    pub fn provider_entity(&self, provider: &str) -> Option<&Entity> {
        self.gateways.values().rev().find(|e| {
            e.role() == Role::Asgw
                && e.gateway.config().provider.as_deref() == Some(provider)
                && e.gateway.state() != GatewayState::Closed
        })
    }

    pub fn record_wire_setup(&mut self, elapsed: Duration) {
        self.report.wire_setup_ms.push(ms(elapsed));
    }

    pub fn set_extra(&mut self, key: &str, value: f64) {
        self.report.extras.insert(key.to_owned(), value);
    }

    pub fn max_extra(&mut self, key: &str, value: f64) {
        let slot = self.report.extras.entry(key.to_owned()).or_insert(value);
        *slot = slot.max(value);
    }

    pub fn record_teardown(&mut self, clean: bool) {
        self.report.teardown_clean = Some(self.report.teardown_clean.unwrap_or(true) && clean);
    }

    pub fn last_kill(&self) -> Option<Instant> {
        self.last_kill
    }

    /// Next payload from `from` on `ctid`: an 8-byte sequence number, then
    /// seeded random bytes, cut to `size`.
    pub fn next_payload(&mut self, from: &str, ctid: &Ctid, size: usize) -> Bytes {
        let list = self
            .sent
            .entry((from.to_owned(), ctid.clone()))
            .or_default();
        let mut bytes = (list.len() as u64 + 1).to_be_bytes().to_vec();
        let mut fill = vec![0u8; size.saturating_sub(bytes.len())];
        self.rng.fill_bytes(&mut fill);
        bytes.extend(fill);
        bytes.truncate(size);
        let payload = Bytes::from(bytes);
        list.push(payload.clone());
        payload
    }

    pub fn sent(&self, from: &str, ctid: &Ctid) -> &[Bytes] {
        self.sent
            .get(&(from.to_owned(), ctid.clone()))
            .map_or(&[], Vec::as_slice)
    }

    /// Transmits `payloads` in order. In the foreground each waits for its
    /// report before the next is sent; in the background all are sent at
    /// once and the reports collected later.
    pub async fn transmit(
        &mut self,
        gw: &str,
        ctid: &Ctid,
        payloads: Vec<Bytes>,
        background: bool,
    ) -> Result<(), String> {
        let gateway = self.gateway(gw)?;
        let ledger = self.ledger.clone();
        let sends = payloads
            .into_iter()
            .map(move |p| transmit_one(gateway.clone(), ctid.clone(), p, ledger.clone()));
        if background {
            let all = futures::future::join_all(sends.collect::<Vec<_>>());
            self.background.push(tokio::spawn(async move {
                all.await;
            }));
        } else {
            for send in sends {
                send.await;
            }
        }
        Ok(())
    }

    /// Waits for background transmissions to resolve.
    pub async fn settle(&mut self, within: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + within;
        let mut done = true;
        for task in self.background.drain(..) {
            if tokio::time::timeout_at(deadline, task).await.is_err() {
                done = false;
            }
        }
        done
    }

    pub async fn inject_fault(&mut self, fault: Fault, target: &str) -> Result<(), HarnessError> {
        let gateway = self.entity(target)?.gateway.clone();
        match fault {
            Fault::KillLink => {
                let session = match self.snapshot().await {
                    Ok(s) => s.session_of(&gateway.config().subscriber).map(|v| v.id),
                    Err(_) => None,
                };
                let at_ms = self.broker.as_ref().map_or(0, Broker::now_ms);
                gateway.link().kill();
                let instant = Instant::now();
                self.kills.push(Kill { at_ms, session });
                self.last_kill = Some(instant);
            }
            Fault::KillProcess => {
                gateway.abort();
                self.last_kill = Some(Instant::now());
            }
            Fault::SwitchEndpoint(options) => gateway
                .reconnect_with(options)
                .await
                .map_err(|e| HarnessError::Fault(target.to_owned(), e.to_string()))?,
        }
        Ok(())
    }

    /// The report as of now.
    pub fn report(&self) -> MetricsReport {
        let mut r = self.report.clone();
        {
            let c = self.ledger.lock().unwrap();
            r.packets_sent = c.sent;
            r.packets_delivered = c.delivered;
            r.packets_lost = c.lost;
            r.packets_in_flight = c.in_flight;
            for v in &c.rtt {
                r.transfer_rtt_ms.push(*v);
            }
        }
        if !self.kills.is_empty() {
            let events = self.log.all();
            let detect = self.kills.iter().filter_map(|k| {
                let s = k.session?;
                events
                    .iter()
                    .find(|e| {
                        e.kind == EventKind::KeepaliveExpired
                            && e.session == Some(s)
                            && e.at >= k.at_ms
                    })
                    .map(|e| e.at - k.at_ms)
            });
            r.watchdog_detect_ms = detect.max();
            let interval = self.settings.broker.keepalive_interval_ms;
            let bound = interval * self.settings.broker.keepalive_misses as u64
                + msbc_broker::tick_period_ms(interval)
                + TIMER_SLACK_MS;
            r.extras.insert("watchdog_bound_ms".into(), bound as f64);
        }
        if !self.gateways.is_empty() {
            let gaps: u64 = self
                .gateways
                .values()
                .map(|e| e.gateway.stats().seq_gaps)
                .sum();
            r.extras.insert("seq_gaps".into(), gaps as f64);
        }
        if self.log.lagged() > 0 {
            r.extras
                .insert("event_log_lagged".into(), self.log.lagged() as f64);
        }
        r
    }

    fn views(&self) -> BTreeMap<String, GatewayView> {
        self.gateways
            .iter()
            .map(|(name, e)| {
                let g = &e.gateway;
                let view = GatewayView {
                    role: e.role(),
                    subscriber: g.config().subscriber.clone(),
                    state: g.state(),
                    access: g.access(),
                    security: g.security(),
                    local_addr: g.local_addr(),
                    commissioned: g.commissioned(),
                    events: e.probe.events(),
                    stats: g.stats(),
                };
                (name.clone(), view)
            })
            .collect()
    }

    fn received(&self) -> BTreeMap<(String, Ctid), Vec<Bytes>> {
        let mut out = BTreeMap::new();
        for (name, e) in &self.gateways {
            for (ctid, data) in e.probe.all_received() {
                out.insert((name.clone(), ctid), data);
            }
        }
        out
    }

    /// Settles, captures the result, then closes every gateway and stops
    /// the broker.
    async fn finish(mut self) -> RunResult {
        let settle = self.settings.report_timeout + Duration::from_secs(1);
        self.settle(settle).await;
        let snapshot = match &self.broker {
            Some(b) => b.snapshot().await.ok(),
            None => None,
        };
        let result = RunResult {
            report: self.report(),
            events: self.log.all(),
            snapshot,
            gateways: self.views(),
            sent: self.sent.clone(),
            received: self.received(),
        };
        let closes: Vec<_> = self.gateways.values().map(|e| e.gateway.clone()).collect();
        let closing = futures::future::join_all(closes.iter().map(|g| g.close()));
        let _ = tokio::time::timeout(Duration::from_secs(5), closing).await;
        if let Some(broker) = self.broker.take() {
            broker.shutdown().await;
        }
        if let Some(c) = self.collector.take() {
            c.abort();
        }
        result
    }
}

async fn transmit_one(gateway: Gateway, ctid: Ctid, payload: Bytes, ledger: Arc<Ledger>) {
    {
        let mut c = ledger.lock().unwrap();
        c.sent += 1;
        c.in_flight += 1;
    }
    let start = Instant::now();
    let outcome = gateway.transmit(&ctid, payload).await;
    let elapsed = start.elapsed();
    let mut c = ledger.lock().unwrap();
    c.in_flight -= 1;
    match outcome {
        Ok(DeliveryOutcome::Delivered) => {
            c.delivered += 1;
            c.rtt.push(ms(elapsed));
        }
        _ => c.lost += 1,
    }
}

/// Runs every step in order against a fresh broker. `seed` drives payload
/// contents.
pub async fn run_scenario(
    scenario: &Scenario,
    seed: u64,
) -> Result<RunResult, Box<ScenarioFailed>> {
    let mut rt = Runtime::new(scenario, seed);
    let mut failure = None;
    for step in &scenario.steps {
        log::debug!("line {}: {}", step.line, step.text);
        if let Err(expectation) = step.action.run(&mut rt).await {
            failure = Some((step.line, step.text.clone(), expectation));
            break;
        }
    }
    let log = rt.log.clone();
    let result = rt.finish().await;
    match failure {
        None => Ok(result),
        Some((line, step, expectation)) => {
            let events = log.all();
            let skip = events.len().saturating_sub(EXCERPT_LINES);
            Err(Box::new(ScenarioFailed {
                scenario: scenario.name.clone(),
                line,
                step,
                expectation,
                log: events[skip..].iter().map(Event::to_string).collect(),
                report: result.report,
            }))
        }
    }
}

/// Event log lines without timestamps or keepalive chatter, for comparing
/// runs. Lines are grouped by session, keeping log order within each group:
/// separate gateway connections interleave as the scheduler pleases, but
/// what happens on one session must reproduce exactly.
pub fn comparable_log(events: &[Event]) -> Vec<String> {
    let mut lines: Vec<(Option<SessionId>, String)> = events
        .iter()
        .filter(|e| e.kind != EventKind::PingSent)
        .map(|e| (e.session, e.untimed()))
        .collect();
    lines.sort_by_key(|(s, _)| *s);
    lines.into_iter().map(|(_, l)| l).collect()
}
