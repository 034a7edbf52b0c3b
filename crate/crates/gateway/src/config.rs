use std::net::IpAddr;
use std::time::Duration;

use msbc_core::wire::{AccessType, Role, DEFAULT_FRAME_SIZE, MAX_FRAME_SIZE, MIN_FRAME_SIZE};

use crate::GatewayError;

/// Delay between reconnect attempts: `initial`, then multiplied up to `cap`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub multiplier: f64,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            initial: Duration::from_millis(100),
            multiplier: 2.0,
            cap: Duration::from_secs(5),
        }
    }
}

impl Backoff {
    /// Delay before attempt `n` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.max(1.0).powi(attempt.min(64) as i32);
        let ms = (self.initial.as_millis() as f64 * factor).min(self.cap.as_millis() as f64);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub role: Role,
    /// SIP-style identity sent as `From`.
    pub subscriber: String,
    /// Required for an ASGW.
    pub provider: Option<String>,
    pub broker_signaling_endpoint: String,
    pub access: AccessType,
    pub reconnect_backoff: Backoff,
    /// Reconnect in the background after the connection is lost.
    pub auto_reconnect: bool,
    /// A transmit with no report after this long resolves `TimedOut`.
    pub report_timeout: Duration,
    pub keepalive_interval: Duration,
    pub keepalive_misses: u32,
    /// Offered in the INVITE; the broker may lower it.
    pub max_frame_size: u32,
    /// Local address to dial from.
    pub local_address: Option<IpAddr>,
    /// DER certificate trusted for secure payload channels.
    pub trusted_certificate: Option<Vec<u8>>,
    /// Bound on each signaling and attach round trip.
    pub handshake_timeout: Duration,
}

impl GatewayConfig {
    pub fn lgw(subscriber: impl Into<String>, broker: impl Into<String>) -> Self {
        GatewayConfig {
            role: Role::Lgw,
            subscriber: subscriber.into(),
            provider: None,
            broker_signaling_endpoint: broker.into(),
            access: AccessType::Radio,
            reconnect_backoff: Backoff::default(),
            auto_reconnect: true,
            report_timeout: Duration::from_secs(2),
            keepalive_interval: Duration::from_secs(5),
            keepalive_misses: 3,
            max_frame_size: DEFAULT_FRAME_SIZE as u32,
            local_address: None,
            trusted_certificate: None,
            handshake_timeout: Duration::from_secs(5),
        }
    }

    pub fn asgw(
        subscriber: impl Into<String>,
        provider: impl Into<String>,
        broker: impl Into<String>,
    ) -> Self {
        GatewayConfig {
            role: Role::Asgw,
            provider: Some(provider.into()),
            ..GatewayConfig::lgw(subscriber, broker)
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::InvalidConfig(m.to_owned()));
        if self.role == Role::Asgw && self.provider.is_none() {
            return invalid("asgw role requires a provider");
        }
        if self.subscriber.is_empty() || self.subscriber.chars().any(|c| c.is_whitespace()) {
            return invalid("subscriber must be a non-empty token");
        }
        if !(MIN_FRAME_SIZE..=MAX_FRAME_SIZE).contains(&(self.max_frame_size as usize)) {
            return invalid("max_frame_size out of range");
        }
        if self.keepalive_interval.is_zero() || self.keepalive_misses == 0 {
            return invalid("keepalive must be positive");
        }
        if self.report_timeout.is_zero() {
            return invalid("report_timeout must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_to_the_cap() {
        let b = Backoff::default();
        let ms: Vec<u128> = (0..8).map(|n| b.delay(n).as_millis()).collect();
        assert_eq!(ms, [100, 200, 400, 800, 1600, 3200, 5000, 5000]);
        assert_eq!(b.delay(1000), Duration::from_secs(5));
    }

    #[test]
    fn asgw_needs_a_provider() {
        let mut c = GatewayConfig::asgw("sip:a@p", "p", "127.0.0.1:1");
        assert!(c.validate().is_ok());
        c.provider = None;
        assert!(matches!(c.validate(), Err(GatewayError::InvalidConfig(_))));
        assert!(GatewayConfig::lgw("", "x").validate().is_err());
    }
}
