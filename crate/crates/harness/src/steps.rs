//! Step verbs. Each verb parses its arguments into a [`Step`]; the
//! [`StepRegistry`] maps verb names to parsers and can be extended.

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::BoxFuture;
use msbc_core::interconnect::EventKind;
use msbc_core::wire::{AccessType, Ctid, Role, Security};
use msbc_gateway::{AttachOutcome, GatewayEvent, GatewayState, ReconnectOptions};

use crate::probe::Probe;
use crate::runner::{until, Fault, Runtime};
use crate::scenario::Args;

const DEFAULT_WITHIN: Duration = Duration::from_secs(2);

pub trait Step: Send + Sync {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>>;

    fn starts_broker(&self) -> bool {
        false
    }

    fn needs_broker(&self) -> bool {
        true
    }

    /// Gateways that must already be started.
    fn references(&self) -> Vec<&str> {
        Vec::new()
    }

    /// Gateway this step starts.
    fn defines(&self) -> Option<&str> {
        None
    }
}

pub trait StepVerb: Send + Sync {
    fn name(&self) -> &'static str;
    fn parse(&self, args: &Args) -> Result<Box<dyn Step>, String>;
}

type ParseFn = fn(&Args) -> Result<Box<dyn Step>, String>;

struct Verb {
    name: &'static str,
    parse: ParseFn,
}

impl StepVerb for Verb {
    fn name(&self) -> &'static str {
        self.name
    }

    fn parse(&self, args: &Args) -> Result<Box<dyn Step>, String> {
        (self.parse)(args)
    }
}

#[derive(Clone, Default)]
pub struct StepRegistry {
    verbs: BTreeMap<&'static str, Arc<dyn StepVerb>>,
}

impl StepRegistry {
    pub fn with_defaults() -> Self {
        let mut reg = StepRegistry::default();
        let builtins: [(&'static str, ParseFn); 16] = [
            ("start_broker", StartBroker::parse),
            ("start_gateway", StartGateway::parse),
            ("attach", Attach::parse),
            ("detach", Detach::parse),
            ("transmit", Transmit::parse),
            ("expect_data", ExpectData::parse),
            ("expect_event", ExpectEvent::parse),
            ("expect_security", ExpectSecurity::parse),
            ("kill_link", |a| Faulty::parse(a, FaultKind::KillLink)),
            ("kill_process", |a| Faulty::parse(a, FaultKind::KillProcess)),
            ("restore_link", |a| Faulty::parse(a, FaultKind::RestoreLink)),
            ("switch_endpoint", SwitchEndpoint::parse),
            ("stop_gateway", StopGateway::parse),
            ("wait", Wait::parse),
            ("settle", Settle::parse),
            ("assert_metric", AssertMetric::parse),
        ];
        for (name, parse) in builtins {
            reg.register(Arc::new(Verb { name, parse }));
        }
        reg
    }

    /// Replaces any verb with the same name.
    pub fn register(&mut self, verb: Arc<dyn StepVerb>) {
        self.verbs.insert(verb.name(), verb);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn StepVerb>> {
        self.verbs.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.verbs.keys().copied()
    }
}

fn ctid(s: &str) -> Result<Ctid, String> {
    Ctid::new(s).map_err(|e| e.to_string())
}

fn within(args: &Args) -> Result<Duration, String> {
    args.opt_or("within", DEFAULT_WITHIN.as_millis() as u64)
        .map(Duration::from_millis)
}

fn elapsed_ms(since: Instant, at: Instant) -> f64 {
    at.saturating_duration_since(since).as_secs_f64() * 1000.0
}

struct StartBroker;

impl StartBroker {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(0, &[])?;
        Ok(Box::new(StartBroker))
    }
}

impl Step for StartBroker {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(rt.start_broker())
    }

    fn starts_broker(&self) -> bool {
        true
    }
}

/// `start_gateway <name> <lgw|asgw> <subscriber> [provider=] [access=]
/// [address=] [deny=ctid,...]`
struct StartGateway {
    name: String,
    role: Role,
    subscriber: String,
    provider: Option<String>,
    access: AccessType,
    address: Option<IpAddr>,
    deny: Vec<String>,
}

impl StartGateway {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(3, &["provider", "access", "address", "deny"])?;
        let role: Role = args
            .pos(1, "role")?
            .parse()
            .map_err(|e: msbc_core::wire::WireError| e.to_string())?;
        let provider = args.opt("provider").map(str::to_owned);
        if (role == Role::Asgw) != provider.is_some() {
            return Err("provider= is required for asgw and only valid there".into());
        }
        Ok(Box::new(StartGateway {
            name: args.pos(0, "name")?.to_owned(),
            role,
            subscriber: args.pos(2, "subscriber")?.to_owned(),
            provider,
            access: args.opt_or("access", AccessType::Radio)?,
            address: args
                .opt("address")
                .map(str::parse)
                .transpose()
                .map_err(|_| "bad address")?,
            deny: args
                .opt("deny")
                .map(|d| d.split(',').map(str::to_owned).collect())
                .unwrap_or_default(),
        }))
    }
}

impl Step for StartGateway {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let mut config =
                rt.gateway_config(self.role, &self.subscriber, self.provider.as_deref())?;
            config.access = self.access;
            config.local_address = self.address;
            let probe = Arc::new(Probe::denying(self.deny.clone()));
            rt.start_gateway(&self.name, config, probe).await
        })
    }

    fn defines(&self) -> Option<&str> {
        Some(&self.name)
    }
}

fn parse_outcome(s: &str) -> Result<AttachOutcome, String> {
    match s {
        "commissioned" => Ok(AttachOutcome::Commissioned),
        "denied" => Ok(AttachOutcome::Denied),
        "provider-unavailable" => Ok(AttachOutcome::ProviderUnavailable),
        other => Err(format!("unknown outcome {other:?}")),
    }
}

/// `attach <gw> <ctid> [expect=<outcome>] [cycles=<n>]`
///
/// With `cycles`, attaches and detaches n times; each establish-and-remove
/// round trip, up to the broker dropping the table entry, is one
/// `wire_setup_ms` sample.
struct Attach {
    gw: String,
    ctid: Ctid,
    expect: AttachOutcome,
    cycles: Option<u32>,
}

impl Attach {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(2, &["expect", "cycles"])?;
        let cycles = args
            .opt("cycles")
            .map(str::parse)
            .transpose()
            .map_err(|_| "bad cycles")?;
        Ok(Box::new(Attach {
            gw: args.pos(0, "gateway")?.to_owned(),
            ctid: ctid(args.pos(1, "ctid")?)?,
            expect: parse_outcome(args.opt("expect").unwrap_or("commissioned"))?,
            cycles,
        }))
    }

    async fn once(&self, rt: &Runtime) -> Result<(), String> {
        let gw = rt.gateway(&self.gw)?;
        let outcome = gw
            .attach_device(&self.ctid)
            .await
            .map_err(|e| e.to_string())?;
        if outcome != self.expect {
            return Err(format!(
                "{}: expected {:?}, got {outcome:?}",
                self.ctid, self.expect
            ));
        }
        Ok(())
    }
}

impl Step for Attach {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let Some(cycles) = self.cycles else {
                return self.once(rt).await;
            };
            let gw = rt.gateway(&self.gw)?;
            for _ in 0..cycles {
                let start = Instant::now();
                self.once(rt).await?;
                gw.detach_device(&self.ctid)
                    .await
                    .map_err(|e| e.to_string())?;
                let deadline = start + DEFAULT_WITHIN;
                while rt.snapshot().await?.entry(self.ctid.as_str()).is_some() {
                    if Instant::now() > deadline {
                        return Err(format!("{} still in the wire table", self.ctid));
                    }
                    tokio::task::yield_now().await;
                }
                rt.record_wire_setup(start.elapsed());
            }
            Ok(())
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw]
    }
}

/// `detach <gw> <ctid>`
struct Detach {
    gw: String,
    ctid: Ctid,
}

impl Detach {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(2, &[])?;
        Ok(Box::new(Detach {
            gw: args.pos(0, "gateway")?.to_owned(),
            ctid: ctid(args.pos(1, "ctid")?)?,
        }))
    }
}

impl Step for Detach {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            rt.gateway(&self.gw)?
                .detach_device(&self.ctid)
                .await
                .map_err(|e| e.to_string())
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw]
    }
}

/// `transmit <gw> <ctid> [count] [size] [background]`
///
/// Payload outcomes feed the packet counters; a lost packet is counted,
/// not failed on.
struct Transmit {
    gw: String,
    ctid: Ctid,
    count: usize,
    size: usize,
    background: bool,
}

impl Transmit {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(5, &[])?;
        let background = match args.positional.get(4).map(String::as_str) {
            None => false,
            Some("background") => true,
            Some(other) => return Err(format!("unexpected argument {other:?}")),
        };
        Ok(Box::new(Transmit {
            gw: args.pos(0, "gateway")?.to_owned(),
            ctid: ctid(args.pos(1, "ctid")?)?,
            count: args.pos_or(2, "count", 1)?,
            size: args.pos_or(3, "size", 64)?,
            background,
        }))
    }
}

impl Step for Transmit {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let payloads = (0..self.count)
                .map(|_| rt.next_payload(&self.gw, &self.ctid, self.size))
                .collect();
            rt.transmit(&self.gw, &self.ctid, payloads, self.background)
                .await
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw]
    }
}

/// `expect_data <gw> <ctid> from=<gw> [count=n] [within=ms]`
///
/// The last `count` payloads `from` sent on `ctid` (default: all) must
/// arrive at `gw` exactly once, in order, byte for byte, and nothing else.
struct ExpectData {
    gw: String,
    ctid: Ctid,
    from: String,
    count: Option<usize>,
    within: Duration,
}

impl ExpectData {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(2, &["from", "count", "within"])?;
        Ok(Box::new(ExpectData {
            gw: args.pos(0, "gateway")?.to_owned(),
            ctid: ctid(args.pos(1, "ctid")?)?,
            from: args.opt("from").ok_or("missing from=<gateway>")?.to_owned(),
            count: args
                .opt("count")
                .map(str::parse)
                .transpose()
                .map_err(|_| "bad count")?,
            within: within(args)?,
        }))
    }
}

impl Step for ExpectData {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let probe = rt
                .entity(&self.gw)
                .map_err(|e| e.to_string())?
                .probe
                .clone();
            let sent = rt.sent(&self.from, &self.ctid).to_vec();
            let count = self.count.unwrap_or(sent.len());
            if count > sent.len() {
                return Err(format!(
                    "only {} payloads were sent on {}",
                    sent.len(),
                    self.ctid
                ));
            }
            until(self.within, || probe.received(&self.ctid).len() >= count).await;
            let got = probe.received(&self.ctid);
            if got.len() != count {
                return Err(format!(
                    "{} on {}: expected {count} payloads, got {}",
                    self.gw,
                    self.ctid,
                    got.len()
                ));
            }
            let want = &sent[sent.len() - count..];
            if let Some(i) = (0..count).find(|&i| got[i] != want[i]) {
                return Err(format!(
                    "{} on {}: payload {i} differs from what was sent",
                    self.gw, self.ctid
                ));
            }
            Ok(())
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw, &self.from]
    }
}

fn parse_event(name: &str, ctid: Option<Ctid>) -> Result<GatewayEvent, String> {
    let need = || ctid.clone().ok_or_else(|| format!("{name} needs a ctid"));
    Ok(match name {
        "commissioned" => GatewayEvent::Commissioned(need()?),
        "denied" => GatewayEvent::Denied(need()?),
        "provider-unavailable" => GatewayEvent::ProviderUnavailable(need()?),
        "peer-down" => GatewayEvent::PeerDown(need()?),
        "peer-up" => GatewayEvent::PeerUp(need()?),
        "decommissioned" => GatewayEvent::Decommissioned(need()?),
        "connection-lost" => GatewayEvent::ConnectionLost,
        "connection-restored" => GatewayEvent::ConnectionRestored,
        other => return Err(format!("unknown event {other:?}")),
    })
}

/// `expect_event <gw> <event> [ctid] [within=ms]`
///
/// A `peer-down` after a fault also records `peer_down_ms`, measured from
/// the latest fault injection.
struct ExpectEvent {
    gw: String,
    event: GatewayEvent,
    within: Duration,
}

impl ExpectEvent {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(3, &["within"])?;
        let ctid = args.positional.get(2).map(|c| ctid(c)).transpose()?;
        Ok(Box::new(ExpectEvent {
            gw: args.pos(0, "gateway")?.to_owned(),
            event: parse_event(args.pos(1, "event")?, ctid)?,
            within: within(args)?,
        }))
    }
}

impl Step for ExpectEvent {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let probe = rt
                .entity(&self.gw)
                .map_err(|e| e.to_string())?
                .probe
                .clone();
            let since = rt.last_kill();
            if !until(self.within, || probe.seen_at(&self.event, None).is_some()).await {
                return Err(format!(
                    "{} did not see {:?} within {:?}",
                    self.gw, self.event, self.within
                ));
            }
            if let (GatewayEvent::PeerDown(_), Some(kill)) = (&self.event, since) {
                if let Some(at) = probe.seen_at(&self.event, Some(kill)) {
                    rt.max_extra("peer_down_ms", elapsed_ms(kill, at));
                }
            }
            Ok(())
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw]
    }
}

/// `expect_security <gw> <plain|secure>`
struct ExpectSecurity {
    gw: String,
    security: Security,
}

impl ExpectSecurity {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(2, &[])?;
        Ok(Box::new(ExpectSecurity {
            gw: args.pos(0, "gateway")?.to_owned(),
            security: args
                .pos(1, "security")?
                .parse()
                .map_err(|e: msbc_core::wire::WireError| e.to_string())?,
        }))
    }
}

impl Step for ExpectSecurity {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let got = rt.gateway(&self.gw)?.security();
            if got != Some(self.security) {
                return Err(format!(
                    "{}: channel is {got:?}, expected {}",
                    self.gw, self.security
                ));
            }
            Ok(())
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw]
    }
}

#[derive(Clone, Copy)]
enum FaultKind {
    KillLink,
    KillProcess,
    RestoreLink,
}

/// `kill_link <gw>`, `kill_process <gw>`, `restore_link <gw>`
struct Faulty {
    gw: String,
    kind: FaultKind,
}

impl Faulty {
    fn parse(args: &Args, kind: FaultKind) -> Result<Box<dyn Step>, String> {
        args.expect(1, &[])?;
        Ok(Box::new(Faulty {
            gw: args.pos(0, "gateway")?.to_owned(),
            kind,
        }))
    }
}

impl Step for Faulty {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let fault = match self.kind {
                FaultKind::KillLink => Fault::KillLink,
                FaultKind::KillProcess => Fault::KillProcess,
                FaultKind::RestoreLink => {
                    rt.gateway(&self.gw)?.link().restore();
                    return Ok(());
                }
            };
            rt.inject_fault(fault, &self.gw)
                .await
                .map_err(|e| e.to_string())
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw]
    }
}

/// `switch_endpoint <gw> [access=] [address=] [within=ms]`
///
/// Reconnects `gw` and waits until every gateway's commissioned set is what
/// it was before the switch. Records `switch_ctids_same` and
/// `switch_secure`.
struct SwitchEndpoint {
    gw: String,
    access: Option<AccessType>,
    address: Option<IpAddr>,
    within: Duration,
}

impl SwitchEndpoint {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(1, &["access", "address", "within"])?;
        Ok(Box::new(SwitchEndpoint {
            gw: args.pos(0, "gateway")?.to_owned(),
            access: args
                .opt("access")
                .map(str::parse)
                .transpose()
                .map_err(|e: msbc_core::wire::WireError| e.to_string())?,
            address: args
                .opt("address")
                .map(str::parse)
                .transpose()
                .map_err(|_| "bad address")?,
            within: within(args)?,
        }))
    }
}

impl Step for SwitchEndpoint {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let open: Vec<_> = rt
                .entities()
                .filter(|(_, e)| e.gateway.state() != GatewayState::Closed)
                .map(|(n, e)| (n.clone(), e.gateway.clone()))
                .collect();
            let views = || {
                open.iter()
                    .map(|(n, g)| (n.clone(), g.commissioned()))
                    .collect::<BTreeMap<_, _>>()
            };
            let before = views();
            let options = ReconnectOptions {
                access: self.access,
                local_address: self.address,
            };
            rt.inject_fault(Fault::SwitchEndpoint(options), &self.gw)
                .await
                .map_err(|e| e.to_string())?;
            let same = until(self.within, || views() == before).await;
            rt.set_extra("switch_ctids_same", same as u8 as f64);
            let secure = rt.gateway(&self.gw)?.security() == Some(Security::Secure);
            rt.set_extra("switch_secure", secure as u8 as f64);
            if !same {
                return Err(format!(
                    "commissioned sets changed: before {before:?}, after {:?}",
                    views()
                ));
            }
            Ok(())
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw]
    }
}

/// `stop_gateway <gw> [within=ms]`
///
/// Clean close. For an LGW, also checks the teardown: its session and
/// entries gone from the broker, every provider told DECOMMISSIONED for
/// each of its ctids, and the event log showing a closed session with each
/// wire released. The outcome lands in `teardown_clean`.
struct StopGateway {
    gw: String,
    within: Duration,
}

impl StopGateway {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(1, &["within"])?;
        Ok(Box::new(StopGateway {
            gw: args.pos(0, "gateway")?.to_owned(),
            within: within(args)?,
        }))
    }
}

impl Step for StopGateway {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let gw = rt.gateway(&self.gw)?;
            if gw.config().role != Role::Lgw {
                gw.close().await;
                return Ok(());
            }
            let before = rt.snapshot().await?;
            let session = before.session_of(&gw.config().subscriber).map(|s| s.id);
            let mut watchers = Vec::new();
            for c in gw.commissioned() {
                let provider = before.entry(c.as_str()).map(|e| e.provider.clone());
                let probe = provider
                    .and_then(|p| rt.provider_entity(&p))
                    .map(|e| e.probe.clone());
                watchers.push((c, probe));
            }
            let mark = rt.log().len();
            let started = Instant::now();
            gw.close().await;

            let mut problems = Vec::new();
            let deadline = started + self.within;
            loop {
                problems.clear();
                let snap = rt.snapshot().await?;
                if let Some(s) = session {
                    if snap.sessions.iter().any(|v| v.id == s) {
                        problems.push(format!("session {s} still registered"));
                    }
                    if snap.entries.iter().any(|e| e.lgw.0 == s) {
                        problems.push("wire table entries remain".to_owned());
                    }
                } else {
                    problems.push("no broker session before close".to_owned());
                }
                if snap.dialogs != snap.sessions.len() {
                    problems.push(format!(
                        "{} dialogs for {} sessions",
                        snap.dialogs,
                        snap.sessions.len()
                    ));
                }
                for (c, probe) in &watchers {
                    match probe {
                        Some(p)
                            if p.seen_at(
                                &GatewayEvent::Decommissioned(c.clone()),
                                Some(started),
                            )
                            .is_some() => {}
                        Some(_) => {
                            problems.push(format!("provider not told {c} was decommissioned"))
                        }
                        None => problems.push(format!("no provider gateway for {c}")),
                    }
                }
                let events = rt.log().since(mark);
                let closed = events
                    .iter()
                    .any(|e| e.kind == EventKind::SessionClosed && e.session == session);
                if !closed {
                    problems.push("no session.closed".to_owned());
                }
                for (c, _) in &watchers {
                    let released = events
                        .iter()
                        .any(|e| e.kind == EventKind::WireReleased && e.ctid.as_ref() == Some(c));
                    if !released {
                        problems.push(format!("no wire.released for {c}"));
                    }
                }
                if problems.is_empty() || Instant::now() > deadline {
                    break;
                }
                tokio::time::sleep(Duration::from_millis(2)).await;
            }
            for p in &problems {
                log::warn!("teardown of {}: {p}", self.gw);
            }
            rt.record_teardown(problems.is_empty());
            rt.set_extra("teardown_wires", watchers.len() as f64);
            Ok(())
        })
    }

    fn references(&self) -> Vec<&str> {
        vec![&self.gw]
    }
}

/// `wait <ms>`
struct Wait(Duration);

impl Wait {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(1, &[])?;
        let ms: u64 = args
            .pos(0, "milliseconds")?
            .parse()
            .map_err(|_| "bad milliseconds")?;
        Ok(Box::new(Wait(Duration::from_millis(ms))))
    }
}

impl Step for Wait {
    fn run<'a>(&'a self, _rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            tokio::time::sleep(self.0).await;
            Ok(())
        })
    }

    fn needs_broker(&self) -> bool {
        false
    }
}

/// `settle [within=ms]`: waits for background transmissions.
struct Settle(Duration);

impl Settle {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(0, &["within"])?;
        Ok(Box::new(Settle(
            args.opt_or("within", 5000).map(Duration::from_millis)?,
        )))
    }
}

impl Step for Settle {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            if rt.settle(self.0).await {
                Ok(())
            } else {
                Err(format!("transmissions still pending after {:?}", self.0))
            }
        })
    }

    fn needs_broker(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Lt,
    Le,
    Eq,
    Ne,
    Ge,
    Gt,
}

impl Op {
    fn parse(s: &str) -> Result<Op, String> {
        Ok(match s {
            "<" => Op::Lt,
            "<=" => Op::Le,
            "==" => Op::Eq,
            "!=" => Op::Ne,
            ">=" => Op::Ge,
            ">" => Op::Gt,
            other => return Err(format!("unknown operator {other:?}")),
        })
    }

    fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Op::Lt => a < b,
            Op::Le => a <= b,
            Op::Eq => a == b,
            Op::Ne => a != b,
            Op::Ge => a >= b,
            Op::Gt => a > b,
        }
    }
}

enum Operand {
    Value(f64),
    Metric(String),
}

/// `assert_metric <name> <op> <number|metric>`
struct AssertMetric {
    name: String,
    op: Op,
    rhs: Operand,
    text: String,
}

impl AssertMetric {
    fn parse(args: &Args) -> Result<Box<dyn Step>, String> {
        args.expect(3, &[])?;
        let name = args.pos(0, "metric")?.to_owned();
        let op_text = args.pos(1, "operator")?;
        let rhs_text = args.pos(2, "value")?;
        let rhs = match rhs_text.parse() {
            Ok(v) => Operand::Value(v),
            Err(_) => Operand::Metric(rhs_text.to_owned()),
        };
        Ok(Box::new(AssertMetric {
            text: format!("{name} {op_text} {rhs_text}"),
            name,
            op: Op::parse(op_text)?,
            rhs,
        }))
    }
}

impl Step for AssertMetric {
    fn run<'a>(&'a self, rt: &'a mut Runtime) -> BoxFuture<'a, Result<(), String>> {
        Box::pin(async move {
            let report = rt.report();
            let value = |name: &str| {
                report
                    .metric(name)
                    .ok_or_else(|| format!("metric {name} was not measured"))
            };
            let lhs = value(&self.name)?;
            let rhs = match &self.rhs {
                Operand::Value(v) => *v,
                Operand::Metric(m) => value(m)?,
            };
            if self.op.holds(lhs, rhs) {
                Ok(())
            } else {
                Err(format!(
                    "{} failed: {} = {lhs}, bound {rhs}",
                    self.text, self.name
                ))
            }
        })
    }

    fn needs_broker(&self) -> bool {
        false
    }
}
