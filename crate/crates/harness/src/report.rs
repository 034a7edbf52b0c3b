use std::collections::BTreeMap;
use std::fmt;

/// Samples of one latency metric, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Distribution {
    samples: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub mean: f64,
}

impl Distribution {
    pub fn push(&mut self, ms: f64) {
        self.samples.push(ms);
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Median of an even count is the mean of the two middle samples; p95
    /// is nearest-rank.
    pub fn summary(&self) -> Option<Summary> {
        if self.samples.is_empty() {
            return None;
        }
        let mut s = self.samples.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Summary {
            count: n,
            min: s[0],
            median,
            p95: s[rank - 1],
            max: s[n - 1],
            mean: s.iter().sum::<f64>() / n as f64,
        })
    }
}

/// Per-scenario measurements. Metrics appear in the output only once
/// observed, so an empty scenario yields an empty report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub scenario: String,
    pub wire_setup_ms: Distribution,
    pub transfer_rtt_ms: Distribution,
    pub packets_sent: u64,
    pub packets_delivered: u64,
    pub packets_lost: u64,
    /// Transmitted and still waiting for a report.
    pub packets_in_flight: u64,
    pub teardown_clean: Option<bool>,
    pub watchdog_detect_ms: Option<u64>,
    /// Scenario-specific values such as `peer_down_ms` or `seq_gaps`.
    pub extras: BTreeMap<String, f64>,
}

const FIELDS: [&str; 6] = ["count", "min", "median", "p95", "max", "mean"];

fn field(s: &Summary, name: &str) -> Option<f64> {
    Some(match name {
        "count" => s.count as f64,
        "min" => s.min,
        "median" => s.median,
        "p95" => s.p95,
        "max" => s.max,
        "mean" => s.mean,
        _ => return None,
    })
}

impl MetricsReport {
    pub fn new(scenario: impl Into<String>) -> Self {
        MetricsReport {
            scenario: scenario.into(),
            ..Default::default()
        }
    }

    /// delivered + lost + in flight = sent.
    pub fn conservation_holds(&self) -> bool {
        self.packets_delivered + self.packets_lost + self.packets_in_flight == self.packets_sent
    }

    pub fn is_empty(&self) -> bool {
        self.wire_setup_ms.is_empty()
            && self.transfer_rtt_ms.is_empty()
            && self.packets_sent == 0
            && self.teardown_clean.is_none()
            && self.watchdog_detect_ms.is_none()
            && self.extras.is_empty()
    }

    /// Looks a metric up by name. A bare distribution name means its
    /// median; `name.field` selects a summary field. Booleans are 0 or 1.
    pub fn metric(&self, name: &str) -> Option<f64> {
        let (base, sub) = match name.split_once('.') {
            Some((b, s)) => (b, Some(s)),
            None => (name, None),
        };
        let dist = match base {
            "wire_setup_ms" => Some(&self.wire_setup_ms),
            "transfer_rtt_ms" => Some(&self.transfer_rtt_ms),
            _ => None,
        };
        if let Some(dist) = dist {
            let sub = sub.unwrap_or("median");
            return match dist.summary() {
                Some(s) => field(&s, sub),
                None if sub == "count" => Some(0.0),
                None => None,
            };
        }
        if sub.is_some() {
            return None;
        }
        match name {
            "packets_sent" => Some(self.packets_sent as f64),
            "packets_delivered" => Some(self.packets_delivered as f64),
            "packets_lost" => Some(self.packets_lost as f64),
            "packets_in_flight" => Some(self.packets_in_flight as f64),
            "conservation" => Some(self.conservation_holds() as u8 as f64),
            "teardown_clean" => self.teardown_clean.map(|b| b as u8 as f64),
            "watchdog_detect_ms" => self.watchdog_detect_ms.map(|v| v as f64),
            other => self.extras.get(other).copied(),
        }
    }

    pub fn summary_lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, dist) in [
            ("wire_setup_ms", &self.wire_setup_ms),
            ("transfer_rtt_ms", &self.transfer_rtt_ms),
        ] {
            if let Some(s) = dist.summary() {
                out.push(format!(
                    "{name}: n={} min={:.3} median={:.3} p95={:.3} max={:.3} mean={:.3}",
                    s.count, s.min, s.median, s.p95, s.max, s.mean
                ));
            }
        }
        if self.packets_sent > 0 {
            out.push(format!(
                "packets: sent={} delivered={} lost={} in_flight={} conservation={}",
                self.packets_sent,
                self.packets_delivered,
                self.packets_lost,
                self.packets_in_flight,
                if self.conservation_holds() {
                    "ok"
                } else {
                    "broken"
                }
            ));
        }
        if let Some(clean) = self.teardown_clean {
            out.push(format!("teardown_clean: {clean}"));
        }
        if let Some(ms) = self.watchdog_detect_ms {
            out.push(format!("watchdog_detect_ms: {ms}"));
        }
        for (k, v) in &self.extras {
            out.push(format!("{k}: {v}"));
        }
        out
    }

    pub fn key_values(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if self.is_empty() {
            return out;
        }
        out.push(("scenario".to_owned(), self.scenario.clone()));
        for (name, dist) in [
            ("wire_setup_ms", &self.wire_setup_ms),
            ("transfer_rtt_ms", &self.transfer_rtt_ms),
        ] {
            if let Some(s) = dist.summary() {
                for f in FIELDS {
                    let v = field(&s, f).unwrap();
                    let text = if f == "count" {
                        format!("{}", s.count)
                    } else {
                        format!("{v:.3}")
                    };
                    out.push((format!("{name}.{f}"), text));
                }
            }
        }
        if self.packets_sent > 0 {
            for (k, v) in [
                ("packets_sent", self.packets_sent),
                ("packets_delivered", self.packets_delivered),
                ("packets_lost", self.packets_lost),
                ("packets_in_flight", self.packets_in_flight),
            ] {
                out.push((k.to_owned(), v.to_string()));
            }
            out.push((
                "conservation".to_owned(),
                self.conservation_holds().to_string(),
            ));
        }
        if let Some(clean) = self.teardown_clean {
            out.push(("teardown_clean".to_owned(), clean.to_string()));
        }
        if let Some(ms) = self.watchdog_detect_ms {
            out.push(("watchdog_detect_ms".to_owned(), ms.to_string()));
        }
        for (k, v) in &self.extras {
            out.push((k.clone(), v.to_string()));
        }
        out
    }
}

/// Summary lines, then `key=value` lines.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for line in self.summary_lines() {
            writeln!(f, "{line}")?;
        }
        for (k, v) in self.key_values() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}
