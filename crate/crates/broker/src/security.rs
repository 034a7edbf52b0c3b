//! Payload channel security strategies.
//!
//! Both strategies share the payload listener. The first byte of a new
//! connection selects one: a TLS handshake starts with `0x16`, a plain
//! channel with the `M` of `MSBC`.

use std::io;
use std::path::Path;
use std::sync::Arc;

use futures::future::BoxFuture;
use msbc_core::wire::Security;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpStream;
use tokio_rustls::rustls::pki_types::pem::PemObject;
use tokio_rustls::rustls::pki_types::{CertificateDer, PrivateKeyDer};
use tokio_rustls::rustls::{self, ServerConfig};
use tokio_rustls::TlsAcceptor;

use crate::BrokerError;

pub trait Transport: AsyncRead + AsyncWrite + Unpin + Send {}
impl<T: AsyncRead + AsyncWrite + Unpin + Send> Transport for T {}

pub type BoxedStream = Box<dyn Transport>;

pub trait Acceptor: Send + Sync {
    fn security(&self) -> Security;
    /// Whether a connection opening with `first` belongs to this strategy.
    fn claims(&self, first: u8) -> bool;
    fn accept(&self, tcp: TcpStream) -> BoxFuture<'static, io::Result<BoxedStream>>;
}

pub struct PlainAcceptor;

impl Acceptor for PlainAcceptor {
    fn security(&self) -> Security {
        Security::Plain
    }

    fn claims(&self, first: u8) -> bool {
        first == b'M'
    }

    fn accept(&self, tcp: TcpStream) -> BoxFuture<'static, io::Result<BoxedStream>> {
        Box::pin(async move { Ok(Box::new(tcp) as BoxedStream) })
    }
}

pub struct TlsStrategy {
    acceptor: TlsAcceptor,
}

impl TlsStrategy {
    pub fn new(identity: &TlsIdentity) -> Result<Self, BrokerError> {
        let provider = Arc::new(rustls::crypto::ring::default_provider());
        let config = ServerConfig::builder_with_provider(provider)
            .with_safe_default_protocol_versions()
            .and_then(|b| {
                b.with_no_client_auth()
                    .with_single_cert(vec![identity.cert.clone()], identity.key.clone_key())
            })
            .map_err(|e| BrokerError::Tls(e.to_string()))?;
        Ok(TlsStrategy {
            acceptor: TlsAcceptor::from(Arc::new(config)),
        })
    }
}

impl Acceptor for TlsStrategy {
    fn security(&self) -> Security {
        Security::Secure
    }

    fn claims(&self, first: u8) -> bool {
        first == 0x16
    }

    fn accept(&self, tcp: TcpStream) -> BoxFuture<'static, io::Result<BoxedStream>> {
        let acceptor = self.acceptor.clone();
        Box::pin(async move {
            let tls = acceptor.accept(tcp).await?;
            Ok(Box::new(tls) as BoxedStream)
        })
    }
}

#[derive(Clone, Default)]
pub struct AcceptorRegistry {
    strategies: Vec<Arc<dyn Acceptor>>,
}

impl AcceptorRegistry {
    pub fn with_defaults(identity: &TlsIdentity) -> Result<Self, BrokerError> {
        let mut reg = AcceptorRegistry::default();
        reg.register(Arc::new(PlainAcceptor));
        reg.register(Arc::new(TlsStrategy::new(identity)?));
        Ok(reg)
    }

    pub fn register(&mut self, strategy: Arc<dyn Acceptor>) {
        self.strategies.push(strategy);
    }

    pub fn select(&self, first: u8) -> Option<Arc<dyn Acceptor>> {
        self.strategies.iter().find(|s| s.claims(first)).cloned()
    }
}

/// Certificate and key served on secure payload channels.
pub struct TlsIdentity {
    pub cert: CertificateDer<'static>,
    key: PrivateKeyDer<'static>,
    pem: String,
}

impl TlsIdentity {
    /// Self-signed for `localhost` and `127.0.0.1`.
    pub fn generate() -> Result<Self, BrokerError> {
        let certified =
            rcgen::generate_simple_self_signed(vec!["localhost".into(), "127.0.0.1".into()])
                .map_err(|e| BrokerError::Tls(e.to_string()))?;
        let key = PrivateKeyDer::try_from(certified.key_pair.serialize_der())
            .map_err(|e| BrokerError::Tls(e.to_string()))?;
        Ok(TlsIdentity {
            cert: certified.cert.der().clone(),
            pem: certified.cert.pem(),
            key,
        })
    }

    pub fn load(cert_path: &Path, key_path: &Path) -> Result<Self, BrokerError> {
        let pem = std::fs::read_to_string(cert_path)
            .map_err(|e| BrokerError::Tls(format!("{}: {e}", cert_path.display())))?;
        let cert = CertificateDer::from_pem_slice(pem.as_bytes())
            .map_err(|e| BrokerError::Tls(format!("{}: {e}", cert_path.display())))?;
        let key = PrivateKeyDer::from_pem_file(key_path)
            .map_err(|e| BrokerError::Tls(format!("{}: {e}", key_path.display())))?;
        Ok(TlsIdentity { cert, key, pem })
    }

    pub fn cert_pem(&self) -> &str {
        &self.pem
    }
}
