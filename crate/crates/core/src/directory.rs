//! CTID to provider resolution.
//!
//! File format, one entry per line:
//!
//! ```text
//! # comment
//! provider <provider-id> subscriber=<sip-id>
//! rule <pattern> -> <provider-id>
//! ```
//!
//! A pattern is either an exact CTID or a prefix followed by `*`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::wire::Ctid;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DirectoryError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("no provider serves ctid {0}")]
    NotFound(Ctid),
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Exact(String),
    Prefix(String),
}

impl Pattern {
    pub fn parse(s: &str) -> Option<Pattern> {
        match s.strip_suffix('*') {
            Some(prefix) => (prefix.is_empty() || Ctid::new(prefix).is_ok())
                .then(|| Pattern::Prefix(prefix.to_owned())),
            None => Ctid::new(s).ok().map(|_| Pattern::Exact(s.to_owned())),
        }
    }

    pub fn matches(&self, ctid: &Ctid) -> bool {
        match self {
            Pattern::Exact(e) => e == ctid.as_str(),
            Pattern::Prefix(p) => ctid.as_str().starts_with(p.as_str()),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Exact(e) => f.write_str(e),
            Pattern::Prefix(p) => write!(f, "{p}*"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderRecord {
    pub id: String,
    pub subscriber: String,
}

fn valid_provider_id(id: &str) -> bool {
    Ctid::new(id).is_ok()
}

fn valid_subscriber(s: &str) -> bool {
    !s.is_empty() && s.len() <= 256 && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

/// Provider records plus routing rules.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubscriptionDirectory {
    providers: BTreeMap<String, ProviderRecord>,
    rules: BTreeMap<Pattern, String>,
    exact: HashMap<String, String>,
    prefixes: HashMap<String, String>,
}

impl SubscriptionDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_provider(&mut self, id: &str, subscriber: &str) -> Result<(), DirectoryError> {
        if !valid_provider_id(id) {
            return Err(DirectoryError::Invalid(format!(
                "invalid provider id {id:?}"
            )));
        }
        if !valid_subscriber(subscriber) {
            return Err(DirectoryError::Invalid(format!(
                "invalid subscriber {subscriber:?}"
            )));
        }
        if self.providers.contains_key(id) {
            return Err(DirectoryError::Invalid(format!("duplicate provider {id}")));
        }
        if let Some(other) = self.providers.values().find(|p| p.subscriber == subscriber) {
            return Err(DirectoryError::Invalid(format!(
                "subscriber {subscriber} already belongs to provider {}",
                other.id
            )));
        }
        self.providers.insert(
            id.to_owned(),
            ProviderRecord {
                id: id.to_owned(),
                subscriber: subscriber.to_owned(),
            },
        );
        Ok(())
    }

    pub fn add_rule(&mut self, pattern: &str, provider: &str) -> Result<(), DirectoryError> {
        let parsed = Pattern::parse(pattern)
            .ok_or_else(|| DirectoryError::Invalid(format!("invalid pattern {pattern:?}")))?;
        if !self.providers.contains_key(provider) {
            return Err(DirectoryError::Invalid(format!(
                "unknown provider {provider}"
            )));
        }
        self.insert_rule(parsed, provider)
    }

    fn insert_rule(&mut self, pattern: Pattern, provider: &str) -> Result<(), DirectoryError> {
        if self.rules.contains_key(&pattern) {
            return Err(DirectoryError::Invalid(format!(
                "duplicate rule for {pattern}"
            )));
        }
        match &pattern {
            Pattern::Exact(e) => self.exact.insert(e.clone(), provider.to_owned()),
            Pattern::Prefix(p) => self.prefixes.insert(p.clone(), provider.to_owned()),
        };
        self.rules.insert(pattern, provider.to_owned());
        Ok(())
    }

    /// Exact rule first, then the longest matching prefix rule.
    pub fn lookup_provider(&self, ctid: &Ctid) -> Result<&str, DirectoryError> {
        if let Some(p) = self.exact.get(ctid.as_str()) {
            return Ok(p);
        }
        let s = ctid.as_str();
        (0..=s.len())
            .rev()
            .find_map(|len| self.prefixes.get(&s[..len]))
            .map(String::as_str)
            .ok_or_else(|| DirectoryError::NotFound(ctid.clone()))
    }

    pub fn provider(&self, id: &str) -> Option<&ProviderRecord> {
        self.providers.get(id)
    }

    pub fn provider_for_subscriber(&self, subscriber: &str) -> Option<&ProviderRecord> {
        self.providers.values().find(|p| p.subscriber == subscriber)
    }

    pub fn providers(&self) -> impl Iterator<Item = &ProviderRecord> {
        self.providers.values()
    }

    pub fn rules(&self) -> impl Iterator<Item = (&Pattern, &str)> {
        self.rules.iter().map(|(p, v)| (p, v.as_str()))
    }

    pub fn parse(text: &str) -> Result<Self, DirectoryError> {
        let mut dir = SubscriptionDirectory::new();
        let mut pending_rules = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |reason: String| DirectoryError::Parse {
                line: line_no,
                reason,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["provider", id, sub] => {
                    let subscriber = sub
                        .strip_prefix("subscriber=")
                        .ok_or_else(|| err("expected subscriber=<sip-id>".into()))?;
                    dir.add_provider(id, subscriber)
                        .map_err(|e| err(e.to_string()))?;
                }
                ["rule", pattern, "->", provider] => {
                    let parsed = Pattern::parse(pattern)
                        .ok_or_else(|| err(format!("invalid pattern {pattern:?}")))?;
                    dir.insert_rule(parsed, provider)
                        .map_err(|e| err(e.to_string()))?;
                    pending_rules.push((line_no, provider.to_string()));
                }
                _ => return Err(err(format!("unrecognized line {line:?}"))),
            }
        }
        for (line, provider) in pending_rules {
            if !dir.providers.contains_key(&provider) {
                return Err(DirectoryError::Parse {
                    line,
                    reason: format!("rule references unknown provider {provider}"),
                });
            }
        }
        Ok(dir)
    }

    /// Canonical text form: providers sorted by id, then rules sorted by
    /// pattern.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for p in self.providers.values() {
            out.push_str(&format!("provider {} subscriber={}\n", p.id, p.subscriber));
        }
        for (pattern, provider) in &self.rules {
            out.push_str(&format!("rule {pattern} -> {provider}\n"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, DirectoryError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DirectoryError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), DirectoryError> {
        std::fs::write(path, self.render())
            .map_err(|e| DirectoryError::Io(format!("{}: {e}", path.display())))
    }
}
