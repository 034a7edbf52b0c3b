//! Client side of the payload channel security strategies.

use std::io;
use std::sync::Arc;

use futures::future::BoxFuture;
use msbc_core::wire::Security;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio_rustls::rustls::pki_types::{CertificateDer, ServerName};
use tokio_rustls::rustls::{self, ClientConfig, RootCertStore};
use tokio_rustls::TlsConnector;

use crate::link::FaultStream;

pub trait Transport: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> Transport for T {}

pub type BoxedStream = Box<dyn Transport>;

pub trait ChannelSecurity: Send + Sync {
    fn security(&self) -> Security;
    /// Wraps a connected stream. `host` is the broker's payload host.
    fn wrap(&self, stream: FaultStream, host: &str) -> BoxFuture<'static, io::Result<BoxedStream>>;
}

pub struct Plain;

impl ChannelSecurity for Plain {
    fn security(&self) -> Security {
        Security::Plain
    }

    fn wrap(
        &self,
        stream: FaultStream,
        _host: &str,
    ) -> BoxFuture<'static, io::Result<BoxedStream>> {
        Box::pin(async move { Ok(Box::new(stream) as BoxedStream) })
    }
}

pub struct Tls {
    connector: Option<TlsConnector>,
}

impl Tls {
    /// Trusts exactly `certificate` (DER). Without one every secure
    /// channel fails.
    pub fn new(certificate: Option<&[u8]>) -> Self {
        let connector = certificate.and_then(|der| {
            let mut roots = RootCertStore::empty();
            roots.add(CertificateDer::from(der.to_vec())).ok()?;
            let provider = Arc::new(rustls::crypto::ring::default_provider());
            let config = ClientConfig::builder_with_provider(provider)
                .with_safe_default_protocol_versions()
                .ok()?
                .with_root_certificates(roots)
                .with_no_client_auth();
            Some(TlsConnector::from(Arc::new(config)))
        });
        Tls { connector }
    }
}

impl ChannelSecurity for Tls {
    fn security(&self) -> Security {
        Security::Secure
    }

    fn wrap(&self, stream: FaultStream, host: &str) -> BoxFuture<'static, io::Result<BoxedStream>> {
        let connector = self.connector.clone();
        let name = ServerName::try_from(host.to_owned());
        Box::pin(async move {
            let connector = connector.ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidInput, "no trusted broker certificate")
            })?;
            let name = name.map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
            let tls = connector.connect(name, stream).await?;
            Ok(Box::new(tls) as BoxedStream)
        })
    }
}

#[derive(Clone, Default)]
pub struct SecurityRegistry {
    strategies: Vec<Arc<dyn ChannelSecurity>>,
}

impl SecurityRegistry {
    pub fn with_defaults(certificate: Option<&[u8]>) -> Self {
        let mut reg = SecurityRegistry::default();
        reg.register(Arc::new(Plain));
        reg.register(Arc::new(Tls::new(certificate)));
        reg
    }

    /// Replaces any strategy for the same security level.
    pub fn register(&mut self, strategy: Arc<dyn ChannelSecurity>) {
        self.strategies
            .retain(|s| s.security() != strategy.security());
        self.strategies.push(strategy);
    }

    pub fn get(&self, security: Security) -> Option<Arc<dyn ChannelSecurity>> {
        self.strategies
            .iter()
            .find(|s| s.security() == security)
            .cloned()
    }
}
