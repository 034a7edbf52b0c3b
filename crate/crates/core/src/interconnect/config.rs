use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::wire::{DEFAULT_FRAME_SIZE, MAX_FRAME_SIZE, MIN_FRAME_SIZE};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {reason}")]
pub struct ConfigError {
    pub line: usize,
    pub reason: String,
}

/// Broker settings, read from `key=value` lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerConfig {
    pub signaling_endpoint: String,
    pub payload_endpoint: String,
    pub keepalive_interval_ms: u64,
    pub keepalive_misses: u32,
    pub buffer_max_packets: usize,
    pub buffer_max_bytes: usize,
    pub max_frame_size: u32,
    pub directory_path: Option<PathBuf>,
    pub tls_cert: Option<PathBuf>,
    pub tls_key: Option<PathBuf>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            signaling_endpoint: "127.0.0.1:5070".into(),
            payload_endpoint: "127.0.0.1:5071".into(),
            keepalive_interval_ms: 5000,
            keepalive_misses: 3,
            buffer_max_packets: 1024,
            buffer_max_bytes: 4 * 1024 * 1024,
            max_frame_size: DEFAULT_FRAME_SIZE as u32,
            directory_path: None,
            tls_cert: None,
            tls_key: None,
        }
    }
}

fn positive<T: FromStr + PartialOrd + Default>(value: &str) -> Result<T, String> {
    match value.parse::<T>() {
        Ok(v) if v > T::default() => Ok(v),
        _ => Err(format!("expected a positive integer, got {value:?}")),
    }
}

fn endpoint(value: &str) -> Result<String, String> {
    match value.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
            Ok(value.to_owned())
        }
        _ => Err(format!("expected host:port, got {value:?}")),
    }
}

impl BrokerConfig {
    /// Fields not present in the text keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = BrokerConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fail = |reason: String| ConfigError {
                line: idx + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail(format!("expected key=value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(fail)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "signaling_endpoint" => self.signaling_endpoint = endpoint(value)?,
            "payload_endpoint" => self.payload_endpoint = endpoint(value)?,
            "keepalive_interval_ms" => self.keepalive_interval_ms = positive(value)?,
            "keepalive_misses" => self.keepalive_misses = positive(value)?,
            "buffer_max_packets" => self.buffer_max_packets = positive(value)?,
            "buffer_max_bytes" => self.buffer_max_bytes = positive(value)?,
            "max_frame_size" => {
                let size: u32 = positive(value)?;
                if !(MIN_FRAME_SIZE as u32..=MAX_FRAME_SIZE as u32).contains(&size) {
                    return Err(format!(
                        "max_frame_size must be in {MIN_FRAME_SIZE}..={MAX_FRAME_SIZE}"
                    ));
                }
                self.max_frame_size = size;
            }
            "directory_path" => self.directory_path = Some(PathBuf::from(value)),
            "tls_cert" => self.tls_cert = Some(PathBuf::from(value)),
            "tls_key" => self.tls_key = Some(PathBuf::from(value)),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }
}

impl fmt::Display for BrokerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "signaling_endpoint={}", self.signaling_endpoint)?;
        writeln!(f, "payload_endpoint={}", self.payload_endpoint)?;
        writeln!(f, "keepalive_interval_ms={}", self.keepalive_interval_ms)?;
        writeln!(f, "keepalive_misses={}", self.keepalive_misses)?;
        writeln!(f, "buffer_max_packets={}", self.buffer_max_packets)?;
        writeln!(f, "buffer_max_bytes={}", self.buffer_max_bytes)?;
        writeln!(f, "max_frame_size={}", self.max_frame_size)?;
        for (key, path) in [
            ("directory_path", &self.directory_path),
            ("tls_cert", &self.tls_cert),
            ("tls_key", &self.tls_key),
        ] {
            if let Some(p) = path {
                writeln!(f, "{key}={}", p.display())?;
            }
        }
        Ok(())
    }
}
