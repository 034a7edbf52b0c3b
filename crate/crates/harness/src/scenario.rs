//! Scenario files.
//!
//! One directive per line; `#` starts a comment.
//!
//! ```text
//! name transfer
//! set keepalive_interval_ms=200
//! provider health sip:asgw@health
//! rule heart-* health
//! step start_broker
//! step start_gateway health asgw sip:asgw@health provider=health
//! step transmit home heart-1 1000 256
//! ```
//!
//! `set` takes a broker config key or `report_timeout_ms`. Step arguments
//! are positional words followed by `key=value` options.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use msbc_core::directory::SubscriptionDirectory;
use msbc_core::interconnect::BrokerConfig;
use thiserror::Error;

use crate::steps::{Step, StepRegistry};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

/// Runtime settings after `set` overrides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Settings {
    pub broker: BrokerConfig,
    pub report_timeout: Duration,
}

impl Default for Settings {
    fn default() -> Self {
        let broker = BrokerConfig {
            signaling_endpoint: "127.0.0.1:0".into(),
            payload_endpoint: "127.0.0.1:0".into(),
            ..BrokerConfig::default()
        };
        Settings {
            broker,
            report_timeout: Duration::from_secs(2),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "report_timeout_ms" => {
                let ms: u64 = value
                    .parse()
                    .map_err(|_| format!("expected milliseconds, got {value:?}"))?;
                self.report_timeout = Duration::from_millis(ms);
                Ok(())
            }
            _ => self.broker.set(key, value),
        }
    }
}

fn is_key(k: &str) -> bool {
    k.starts_with(|c: char| c.is_ascii_alphabetic())
        && k.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Words of one step line: positional arguments, then `key=value` options.
/// Comparison operators such as `<=` are positional.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Args {
    pub positional: Vec<String>,
    pub named: BTreeMap<String, String>,
}

impl Args {
    pub fn parse(words: &[&str]) -> Result<Args, String> {
        let mut args = Args::default();
        for w in words {
            match w.split_once('=') {
                Some((k, v)) if is_key(k) => {
                    if args.named.insert(k.to_owned(), v.to_owned()).is_some() {
                        return Err(format!("option {k} given twice"));
                    }
                }
                _ if !args.named.is_empty() => {
                    return Err(format!("positional argument {w:?} after options"));
                }
                _ => args.positional.push((*w).to_owned()),
            }
        }
        Ok(args)
    }

    pub fn pos(&self, idx: usize, what: &str) -> Result<&str, String> {
        self.positional
            .get(idx)
            .map(String::as_str)
            .ok_or_else(|| format!("missing {what}"))
    }

    pub fn pos_or<T: FromStr>(&self, idx: usize, what: &str, default: T) -> Result<T, String> {
        match self.positional.get(idx) {
            Some(v) => v.parse().map_err(|_| format!("bad {what} {v:?}")),
            None => Ok(default),
        }
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        self.named.get(key).map(String::as_str)
    }

    pub fn opt_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, String> {
        match self.named.get(key) {
            Some(v) => v.parse().map_err(|_| format!("bad {key} {v:?}")),
            None => Ok(default),
        }
    }

    /// Rejects extra positional words and unknown options.
    pub fn expect(&self, max_positional: usize, keys: &[&str]) -> Result<(), String> {
        if self.positional.len() > max_positional {
            return Err(format!(
                "unexpected argument {:?}",
                self.positional[max_positional]
            ));
        }
        match self.named.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(format!("unknown option {k}")),
            None => Ok(()),
        }
    }
}

pub struct ScenarioStep {
    pub line: usize,
    pub text: String,
    pub action: Box<dyn Step>,
}

impl fmt::Debug for ScenarioStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.line, self.text)
    }
}

#[derive(Debug)]
pub struct Scenario {
    pub name: String,
    /// `set` lines in file order.
    pub overrides: Vec<(String, String)>,
    pub settings: Settings,
    pub directory: SubscriptionDirectory,
    pub steps: Vec<ScenarioStep>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ParseError> {
        Self::parse_with(text, &StepRegistry::with_defaults())
    }

    pub fn parse_with(text: &str, registry: &StepRegistry) -> Result<Scenario, ParseError> {
        let mut scenario = Scenario {
            name: String::new(),
            overrides: Vec::new(),
            settings: Settings::default(),
            directory: SubscriptionDirectory::new(),
            steps: Vec::new(),
        };
        let mut broker_started = false;
        let mut started = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let fail = |reason: String| ParseError { line, reason };
            let content = raw.split('#').next().unwrap_or("").trim();
            let words: Vec<&str> = content.split_whitespace().collect();
            let Some((&head, rest)) = words.split_first() else {
                continue;
            };
            match head {
                "name" => match rest {
                    [name] => scenario.name = (*name).to_owned(),
                    _ => return Err(fail("expected: name <name>".into())),
                },
                "set" => {
                    let [kv] = rest else {
                        return Err(fail("expected: set key=value".into()));
                    };
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| fail(format!("expected key=value, got {kv:?}")))?;
                    scenario.settings.set(k, v).map_err(fail)?;
                    scenario.overrides.push((k.to_owned(), v.to_owned()));
                }
                "provider" => match rest {
                    [id, subscriber] => scenario
                        .directory
                        .add_provider(id, subscriber)
                        .map_err(|e| fail(e.to_string()))?,
                    _ => return Err(fail("expected: provider <id> <subscriber>".into())),
                },
                "rule" => match rest {
                    [pattern, provider] => scenario
                        .directory
                        .add_rule(pattern, provider)
                        .map_err(|e| fail(e.to_string()))?,
                    _ => return Err(fail("expected: rule <pattern> <provider>".into())),
                },
                "step" => {
                    let Some((&verb, args)) = rest.split_first() else {
                        return Err(fail("expected: step <verb> <args...>".into()));
                    };
                    let parser = registry
                        .get(verb)
                        .ok_or_else(|| fail(format!("unknown step {verb:?}")))?;
                    let args = Args::parse(args).map_err(|e| fail(format!("{verb}: {e}")))?;
                    let action = parser
                        .parse(&args)
                        .map_err(|e| fail(format!("{verb}: {e}")))?;
                    if action.starts_broker() {
                        if broker_started {
                            return Err(fail("broker already started".into()));
                        }
                        broker_started = true;
                    } else if action.needs_broker() && !broker_started {
                        return Err(fail(format!("{verb} before start_broker")));
                    }
                    for name in action.references() {
                        if !started.contains(name) {
                            return Err(fail(format!("{verb}: unknown gateway {name:?}")));
                        }
                    }
                    if let Some(name) = action.defines() {
                        if !started.insert(name.to_owned()) {
                            return Err(fail(format!("gateway {name:?} already started")));
                        }
                    }
                    scenario.steps.push(ScenarioStep {
                        line,
                        text: content.to_owned(),
                        action,
                    });
                }
                other => return Err(fail(format!("unknown directive {other:?}"))),
            }
        }
        if scenario.name.is_empty() {
            scenario.name = "unnamed".into();
        }
        Ok(scenario)
    }

    /// Reads and parses a file. Without a `name` line the file stem is the
    /// name.
    pub fn load(path: &Path) -> Result<Scenario, crate::HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::HarnessError::Io(path.display().to_string(), e.to_string()))?;
        let mut scenario = Self::parse(&text)
            .map_err(|e| crate::HarnessError::Parse(path.display().to_string(), e))?;
        if scenario.name == "unnamed" {
            if let Some(stem) = path.file_stem() {
                scenario.name = stem.to_string_lossy().into_owned();
            }
        }
        Ok(scenario)
    }
}
