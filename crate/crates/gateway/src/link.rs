//! The gateway's network attachment, with a kill switch for fault injection.
//!
//! [`Link::kill`] models an unplugged interface: streams opened before the
//! kill swallow writes, never yield reads, and keep their sockets open after
//! they are dropped so the broker sees silence rather than a FIN. New
//! connections fail until [`Link::restore`].

use std::io;
use std::net::{IpAddr, SocketAddr};
use std::pin::Pin;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};

use tokio::io::{AsyncRead, AsyncWrite, ReadBuf};
use tokio::net::{TcpSocket, TcpStream};

#[derive(Default)]
struct LinkState {
    down: AtomicBool,
    epoch: AtomicU64,
    graveyard: Mutex<Vec<TcpStream>>,
}

#[derive(Clone, Default)]
pub struct Link {
    state: Arc<LinkState>,
}

impl Link {
    pub fn new() -> Self {
        Link::default()
    }

    /// Cuts every open stream silently and refuses new connections.
    pub fn kill(&self) {
        self.state.epoch.fetch_add(1, Ordering::SeqCst);
        self.state.down.store(true, Ordering::SeqCst);
    }

    /// Cuts the streams open now but leaves the link usable.
    pub fn sever(&self) {
        self.state.epoch.fetch_add(1, Ordering::SeqCst);
    }

    /// Brings the link back. Streams cut earlier stay dead; their sockets
    /// are closed now.
    pub fn restore(&self) {
        self.state.down.store(false, Ordering::SeqCst);
        self.state.graveyard.lock().unwrap().clear();
    }

    pub fn is_down(&self) -> bool {
        self.state.down.load(Ordering::SeqCst)
    }

    pub async fn connect(
        &self,
        addr: SocketAddr,
        local: Option<IpAddr>,
    ) -> io::Result<FaultStream> {
        if self.is_down() {
            return Err(io::Error::new(
                io::ErrorKind::NetworkUnreachable,
                "link down",
            ));
        }
        let socket = if addr.is_ipv4() {
            TcpSocket::new_v4()?
        } else {
            TcpSocket::new_v6()?
        };
        if let Some(ip) = local {
            socket.bind(SocketAddr::new(ip, 0))?;
        }
        let tcp = socket.connect(addr).await?;
        tcp.set_nodelay(true)?;
        Ok(FaultStream {
            inner: Some(tcp),
            epoch: self.state.epoch.load(Ordering::SeqCst),
            link: self.state.clone(),
        })
    }
}

pub struct FaultStream {
    inner: Option<TcpStream>,
    epoch: u64,
    link: Arc<LinkState>,
}

impl FaultStream {
    fn cut(&self) -> bool {
        self.link.epoch.load(Ordering::SeqCst) != self.epoch
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.inner.as_ref().expect("live stream").local_addr()
    }

    fn tcp(&mut self) -> Pin<&mut TcpStream> {
        Pin::new(self.inner.as_mut().expect("live stream"))
    }
}

impl AsyncRead for FaultStream {
    fn poll_read(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &mut ReadBuf<'_>,
    ) -> Poll<io::Result<()>> {
        if self.cut() {
            return Poll::Pending;
        }
        self.tcp().poll_read(cx, buf)
    }
}

impl AsyncWrite for FaultStream {
    fn poll_write(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &[u8],
    ) -> Poll<io::Result<usize>> {
        if self.cut() {
            return Poll::Ready(Ok(buf.len()));
        }
        self.tcp().poll_write(cx, buf)
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        if self.cut() {
            return Poll::Ready(Ok(()));
        }
        self.tcp().poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        if self.cut() {
            return Poll::Ready(Ok(()));
        }
        self.tcp().poll_shutdown(cx)
    }
}

impl Drop for FaultStream {
    fn drop(&mut self) {
        if self.cut() {
            if let Some(tcp) = self.inner.take() {
                self.link.graveyard.lock().unwrap().push(tcp);
            }
        }
    }
}
