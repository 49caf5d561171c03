use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

use super::codec::{self, CodecError, Message, MalformedReason, AbortReason, HEADER_LEN, CHECKSUM_LEN, MAX_PAYLOAD};

/// A bidirectional byte stream the protocol can run over.
pub trait Transport: Read + Write + Send {
    /// Read timeout; `None` blocks indefinitely.
    fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
    /// Closes both directions. Further reads on the peer see end-of-stream.
    fn close(&mut self);
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        (**self).set_timeout(timeout)
    }

    fn close(&mut self) {
        (**self).close()
    }
}

impl Transport for TcpStream {
    fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.set_read_timeout(timeout)?;
        self.set_write_timeout(timeout)
    }

    fn close(&mut self) {
        let _ = self.shutdown(Shutdown::Both);
    }
}

/// In-process stream backed by a pair of channels.
#[derive(Debug)]
pub struct ChannelStream {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    pos: usize,
    timeout: Option<Duration>,
}

/// Two connected in-process endpoints.
pub fn channel_pair() -> (ChannelStream, ChannelStream) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    let end = |tx, rx| ChannelStream {
        tx: Some(tx),
        rx,
        pending: Vec::new(),
        pos: 0,
        timeout: None,
    };
    (end(a_tx, a_rx), end(b_tx, b_rx))
}

impl Read for ChannelStream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        while self.pos == self.pending.len() {
            let next = match self.timeout {
                Some(t) => self.rx.recv_timeout(t),
                None => self.rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
            };
            match next {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.pos = 0;
                }
                Err(RecvTimeoutError::Disconnected) => return Ok(0),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(io::Error::new(io::ErrorKind::TimedOut, "read timed out"))
                }
            }
        }
        let n = buf.len().min(self.pending.len() - self.pos);
        buf[..n].copy_from_slice(&self.pending[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Write for ChannelStream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let tx = self
            .tx
            .as_ref()
            .ok_or_else(|| io::Error::new(io::ErrorKind::BrokenPipe, "stream closed"))?;
        tx.send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Transport for ChannelStream {
    fn set_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.timeout = timeout;
        Ok(())
    }

    fn close(&mut self) {
        self.tx = None;
    }
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("timed out waiting for the peer")]
    Timeout,
    #[error("peer disconnected")]
    Disconnected,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("transport error: {0}")]
    Io(io::Error),
}

impl LinkError {
    /// The abort reason that describes this failure.
    pub fn abort_reason(&self) -> AbortReason {
        match self {
            LinkError::Timeout => AbortReason::Timeout,
            LinkError::Disconnected | LinkError::Io(_) => AbortReason::Disconnect,
            LinkError::Codec(CodecError::VersionMismatch { .. }) => AbortReason::VersionMismatch,
            LinkError::Codec(CodecError::MalformedFrame { .. }) => AbortReason::Malformed,
        }
    }
}

impl From<io::Error> for LinkError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => LinkError::Timeout,
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::NotConnected => LinkError::Disconnected,
            _ => LinkError::Io(e),
        }
    }
}

/// Frames messages over a [`Transport`] and counts the bytes moved.
#[derive(Debug)]
pub struct Link<T> {
    inner: T,
    bytes_sent: u64,
    bytes_received: u64,
}

impl<T: Transport> Link<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            bytes_sent: 0,
            bytes_received: 0,
        }
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<(), LinkError> {
        Ok(self.inner.set_timeout(timeout)?)
    }

    pub fn send(&mut self, m: &Message) -> Result<(), LinkError> {
        self.send_raw(&codec::encode(m))
    }

    /// Writes pre-encoded bytes as they are.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), LinkError> {
        self.inner.write_all(bytes)?;
        self.inner.flush()?;
        self.bytes_sent += bytes.len() as u64;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Message, LinkError> {
        let mut head = [0u8; HEADER_LEN];
        self.inner.read_exact(&mut head)?;
        self.bytes_received += HEADER_LEN as u64;
        let header = codec::parse_header(&head)?;
        if header.payload_len > MAX_PAYLOAD {
            return Err(CodecError::MalformedFrame {
                reason: MalformedReason::TooLarge,
            }
            .into());
        }
        let mut rest = vec![0u8; header.payload_len + CHECKSUM_LEN];
        self.inner.read_exact(&mut rest)?;
        self.bytes_received += rest.len() as u64;
        let (payload, crc) = rest.split_at(header.payload_len);
        let crc = u32::from_le_bytes(crc.try_into().unwrap());
        Ok(codec::decode_payload(header.msg_type, payload, crc)?)
    }

    pub fn close(&mut self) {
        self.inner.close();
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn bytes_received(&self) -> u64 {
        self.bytes_received
    }

    pub fn get_ref(&self) -> &T {
        &self.inner
    }
}
