use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::codec::{AbortReason, Message};
use super::session::{ServerSession, SessionError, SlotGuard};
use super::transport::{Link, Transport};

const REJECT_TIMEOUT: Duration = Duration::from_secs(1);

/// A TCP listener that serves one client at a time. Connections arriving
/// while a session is active are answered with `Abort { Busy }`.
#[derive(Debug)]
pub struct TcpServer {
    addr: SocketAddr,
    incoming: Receiver<(TcpStream, SlotGuard)>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    timeout: Duration,
}

impl TcpServer {
    pub fn bind<A: ToSocketAddrs>(addr: A, timeout: Duration) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let slot = Arc::new(AtomicBool::new(false));
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, incoming) = mpsc::channel();
        let acceptor = {
            let stop = Arc::clone(&stop);
            thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::Acquire) {
                        break;
                    }
                    let Ok(stream) = conn else { continue };
                    let _ = stream.set_nodelay(true);
                    match SlotGuard::try_claim(&slot) {
                        Some(guard) => {
                            if tx.send((stream, guard)).is_err() {
                                break;
                            }
                        }
                        None => {
                            thread::spawn(move || reject_busy(stream));
                        }
                    }
                }
            })
        };
        Ok(Self {
            addr,
            incoming,
            stop,
            acceptor: Some(acceptor),
            timeout,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Waits up to the server timeout for the next client and completes its
    /// handshake.
    pub fn accept(&self) -> Result<ServerSession<TcpStream>, SessionError> {
        self.accept_with(|s| s)
    }

    /// Like [`accept`](Self::accept), wrapping the stream first.
    pub fn accept_with<T: Transport>(
        &self,
        wrap: impl FnOnce(TcpStream) -> T,
    ) -> Result<ServerSession<T>, SessionError> {
        match self.incoming.recv_timeout(self.timeout) {
            Ok((stream, guard)) => ServerSession::accept_in_slot(wrap(stream), self.timeout, Some(guard)),
            Err(RecvTimeoutError::Timeout) => Err(SessionError::AcceptTimeout),
            Err(RecvTimeoutError::Disconnected) => Err(SessionError::ServerClosed),
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn reject_busy(stream: TcpStream) {
    let Ok(reader) = stream.try_clone() else { return };
    let mut link = Link::new(reader);
    let _ = link.set_timeout(Some(REJECT_TIMEOUT));
    // Read the Hello first so closing does not reset the connection before
    // the client sees the Abort.
    let _ = link.recv();
    let _ = link.send(&Message::Abort {
        round_id: 0,
        reason: AbortReason::Busy,
    });
    let _ = stream.shutdown(Shutdown::Write);
    let mut sink = [0u8; 64];
    while matches!(io::Read::read(&mut &stream, &mut sink), Ok(n) if n > 0) {}
}
