//! The smart-home topology: one house LGW with simulated devices and five
//! provider ASGWs.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use msbc_broker::Broker;
use msbc_core::directory::SubscriptionDirectory;
use msbc_core::wire::Ctid;
use msbc_gateway::{AttachOutcome, DeliveryOutcome, Gateway, GatewayConfig};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::probe::Probe;
use crate::HarnessError;

pub const HOUSE: &str = "sip:lgw@house";

/// Provider id and ASGW subscriber.
pub const PROVIDERS: [(&str, &str); 5] = [
    ("health", "sip:asgw@health"),
    ("home-automation", "sip:asgw@home-automation"),
    ("utility", "sip:asgw@utility"),
    ("grocery", "sip:asgw@grocery"),
    ("security", "sip:asgw@security"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceKind {
    /// Sends readings to its provider.
    Sensor,
    /// Takes commands from its provider.
    Actuator,
}

#[derive(Debug, Clone, Copy)]
pub struct DeviceSpec {
    pub ctid: &'static str,
    pub provider: &'static str,
    pub kind: DeviceKind,
}

const fn device(ctid: &'static str, provider: &'static str, kind: DeviceKind) -> DeviceSpec {
    DeviceSpec {
        ctid,
        provider,
        kind,
    }
}

pub const DEVICES: [DeviceSpec; 11] = [
    device("heart-1", "health", DeviceKind::Sensor),
    device("heart-2", "health", DeviceKind::Sensor),
    device("light-1", "home-automation", DeviceKind::Actuator),
    device("light-2", "home-automation", DeviceKind::Actuator),
    device("light-3", "home-automation", DeviceKind::Actuator),
    device("fan-1", "home-automation", DeviceKind::Actuator),
    device("thermo-1", "home-automation", DeviceKind::Sensor),
    device("meter-1", "utility", DeviceKind::Sensor),
    device("milk-1", "grocery", DeviceKind::Sensor),
    device("door-1", "security", DeviceKind::Actuator),
    device("camera-1", "security", DeviceKind::Sensor),
];

/// Directory routing every device family to its provider.
pub fn directory() -> SubscriptionDirectory {
    let mut dir = SubscriptionDirectory::new();
    for (id, subscriber) in PROVIDERS {
        dir.add_provider(id, subscriber).expect("valid provider");
    }
    for (pattern, provider) in [
        ("heart-*", "health"),
        ("light-*", "home-automation"),
        ("fan-*", "home-automation"),
        ("thermo-*", "home-automation"),
        ("meter-*", "utility"),
        ("milk-*", "grocery"),
        ("door-*", "security"),
        ("camera-*", "security"),
    ] {
        dir.add_rule(pattern, provider).expect("valid rule");
    }
    dir
}

#[derive(Debug, Clone)]
pub struct SmartHomeOptions {
    pub reading_period: Duration,
    pub command_period: Duration,
    pub keepalive_interval: Duration,
    pub seed: u64,
}

impl Default for SmartHomeOptions {
    fn default() -> Self {
        SmartHomeOptions {
            reading_period: Duration::from_secs(1),
            command_period: Duration::from_secs(1),
            keepalive_interval: Duration::from_secs(5),
            seed: 1,
        }
    }
}

pub struct Provider {
    pub id: &'static str,
    pub gateway: Gateway,
    pub probe: Arc<Probe>,
}

pub struct SmartHome {
    pub house: Gateway,
    pub house_probe: Arc<Probe>,
    pub providers: Vec<Provider>,
    options: SmartHomeOptions,
}

/// What one [`SmartHome::run`] sent, per ctid in order.
#[derive(Debug, Clone, Default)]
pub struct Traffic {
    pub sent: BTreeMap<Ctid, Vec<Bytes>>,
    pub delivered: u64,
    pub lost: u64,
}

fn ctid(s: &str) -> Ctid {
    Ctid::new(s).expect("valid ctid")
}

/// Starts the five providers, then the house, and attaches every device.
/// The broker must serve [`directory`].
pub async fn simulate_smart_home(
    broker: &Broker,
    options: SmartHomeOptions,
) -> Result<SmartHome, HarnessError> {
    let endpoint = broker.signaling_addr().to_string();
    let configure = |mut config: GatewayConfig| {
        config.trusted_certificate = Some(broker.certificate().to_vec());
        config.keepalive_interval = options.keepalive_interval;
        config
    };
    let mut providers = Vec::new();
    for (id, subscriber) in PROVIDERS {
        let probe = Arc::new(Probe::default());
        let config = configure(GatewayConfig::asgw(subscriber, id, endpoint.clone()));
        let gateway = Gateway::open(config, probe.clone())
            .await
            .map_err(|e| HarnessError::Startup(id.to_owned(), e.to_string()))?;
        providers.push(Provider { id, gateway, probe });
    }
    let house_probe = Arc::new(Probe::default());
    let house = Gateway::open(
        configure(GatewayConfig::lgw(HOUSE, endpoint)),
        house_probe.clone(),
    )
    .await
    .map_err(|e| HarnessError::Startup("house".to_owned(), e.to_string()))?;
    for d in DEVICES {
        let outcome = house
            .attach_device(&ctid(d.ctid))
            .await
            .map_err(|e| HarnessError::Startup(d.ctid.to_owned(), e.to_string()))?;
        if outcome != AttachOutcome::Commissioned {
            return Err(HarnessError::Startup(
                d.ctid.to_owned(),
                format!("{outcome:?}"),
            ));
        }
    }
    Ok(SmartHome {
        house,
        house_probe,
        providers,
        options,
    })
}

fn reading(spec: &DeviceSpec, n: u64, rng: &mut ChaCha8Rng) -> Bytes {
    let text = match spec.ctid.split('-').next().unwrap_or("") {
        "heart" => format!("n={n} bpm={}", rng.gen_range(55..110)),
        "thermo" => format!("n={n} celsius={:.1}", rng.gen_range(18.0..24.0)),
        "meter" => format!("n={n} kwh={}", 1000 + n * rng.gen_range(1..4)),
        "milk" => format!("n={n} bottles={}", rng.gen_range(0..5)),
        "camera" => {
            let mut frame = format!("n={n} frame=").into_bytes();
            let mut pixels = vec![0u8; 1024];
            rng.fill_bytes(&mut pixels);
            frame.extend(pixels);
            return Bytes::from(frame);
        }
        _ => format!("n={n}"),
    };
    Bytes::from(text)
}

fn command(spec: &DeviceSpec, n: u64) -> Bytes {
    let text = match spec.ctid.split('-').next().unwrap_or("") {
        "light" => format!("n={n} {}", if n % 2 == 1 { "on" } else { "off" }),
        "fan" => format!("n={n} speed={}", n % 4),
        "door" => format!("n={n} {}", if n % 2 == 1 { "open" } else { "close" }),
        _ => format!("n={n}"),
    };
    Bytes::from(text)
}

impl SmartHome {
    pub fn provider(&self, id: &str) -> Option<&Provider> {
        self.providers.iter().find(|p| p.id == id)
    }

    /// Commissioned wires, counted from the house side.
    pub fn wires(&self) -> usize {
        self.house.commissioned().len()
    }

    /// Sends one command from `provider` to actuator `ctid`.
    pub async fn command(
        &self,
        provider: &str,
        ctid: &Ctid,
        data: impl Into<Bytes>,
    ) -> Result<DeliveryOutcome, HarnessError> {
        let p = self
            .provider(provider)
            .ok_or_else(|| HarnessError::UnknownTarget(provider.to_owned()))?;
        p.gateway
            .transmit(ctid, data)
            .await
            .map_err(|e| HarnessError::Fault(provider.to_owned(), e.to_string()))
    }

    /// Runs every sensor and every provider's actuator commands for
    /// `duration`. A device with period p sends floor(duration / p)
    /// messages, the first at once.
    pub async fn run(&self, duration: Duration) -> Traffic {
        let mut rng = ChaCha8Rng::seed_from_u64(self.options.seed);
        let mut plans = Vec::new();
        for spec in DEVICES {
            let (gateway, period) = match spec.kind {
                DeviceKind::Sensor => (self.house.clone(), self.options.reading_period),
                DeviceKind::Actuator => {
                    let p = self.provider(spec.provider).expect("known provider");
                    (p.gateway.clone(), self.options.command_period)
                }
            };
            let count = (duration.as_secs_f64() / period.as_secs_f64()).floor() as u64;
            let payloads: Vec<Bytes> = (1..=count)
                .map(|n| match spec.kind {
                    DeviceKind::Sensor => reading(&spec, n, &mut rng),
                    DeviceKind::Actuator => command(&spec, n),
                })
                .collect();
            plans.push((ctid(spec.ctid), gateway, period, payloads));
        }

        let mut traffic = Traffic::default();
        let mut tasks = Vec::new();
        for (c, gateway, period, payloads) in plans {
            traffic.sent.insert(c.clone(), payloads.clone());
            tasks.push(tokio::spawn(async move {
                let mut ticker = tokio::time::interval(period);
                let mut outcomes = Vec::new();
                for p in payloads {
                    ticker.tick().await;
                    outcomes.push(gateway.transmit(&c, p).await);
                }
                outcomes
            }));
        }
        for task in tasks {
            for outcome in task.await.unwrap_or_default() {
                match outcome {
                    Ok(DeliveryOutcome::Delivered) => traffic.delivered += 1,
                    _ => traffic.lost += 1,
                }
            }
        }
        traffic
    }

    /// Everything `traffic` sent must have arrived exactly once and in
    /// order at the other end. Returns the discrepancies.
    pub fn verify(&self, traffic: &Traffic) -> Vec<String> {
        let mut problems = Vec::new();
        for spec in DEVICES {
            let c = ctid(spec.ctid);
            let probe = match spec.kind {
                DeviceKind::Sensor => &self.provider(spec.provider).expect("known provider").probe,
                DeviceKind::Actuator => &self.house_probe,
            };
            let sent = traffic.sent.get(&c).cloned().unwrap_or_default();
            let got = probe.received(&c);
            if got != sent {
                problems.push(format!(
                    "{c}: sent {}, received {} (or out of order)",
                    sent.len(),
                    got.len()
                ));
            }
        }
        problems
    }

    /// One line per provider: wires, readings in, commands out.
    pub fn summary(&self, traffic: &Traffic) -> Vec<String> {
        self.providers
            .iter()
            .map(|p| {
                let devices: Vec<&DeviceSpec> =
                    DEVICES.iter().filter(|d| d.provider == p.id).collect();
                let count = |kind| -> usize {
                    devices
                        .iter()
                        .filter(|d| d.kind == kind)
                        .map(|d| traffic.sent.get(&ctid(d.ctid)).map_or(0, Vec::len))
                        .sum()
                };
                format!(
                    "{}: wires={} readings={} commands={} received={}",
                    p.id,
                    p.gateway.commissioned().len(),
                    count(DeviceKind::Sensor),
                    count(DeviceKind::Actuator),
                    p.probe.received_count()
                )
            })
            .collect()
    }

    /// Clean shutdown: the house first, then the providers.
    pub async fn shutdown(self) {
        self.house.close().await;
        for p in &self.providers {
            p.gateway.close().await;
        }
    }
}
