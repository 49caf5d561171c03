//! Wire protocol for the serial client/server schema.
//!
//! A session starts with the client's `Hello`. The server then drives it:
//! `WeightsDown` → `WeightsUp` for a training round, `EvalRequest` →
//! `EvalReport` for an evaluation, and `Bye` to finish. Either side may send
//! `Abort` instead of its next message. A server has at most one active
//! session at any time.
//!
//! The same framing runs over an in-process [`ChannelStream`] and over TCP.

mod client;
pub mod codec;
mod session;
mod tcp;
mod transport;

pub use client::{client_loop, ClientConfig, ClientEnd, ClientError, ClientStats, Fault, LocalTraining};
pub use codec::{decode, encode, AbortReason, CodecError, MalformedReason, Message, PROTOCOL_VERSION};
pub use session::{EvalOutcome, Phase, RoundOutcome, ServerSession, SessionError, SlotGuard, DEFAULT_TIMEOUT};
pub use tcp::TcpServer;
pub use transport::{channel_pair, ChannelStream, Link, LinkError, Transport};

use codec::{frame_len, weights_len};

/// Bytes moved in each direction by one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SessionBytes {
    /// Server to client.
    pub down: u64,
    /// Client to server.
    pub up: u64,
}

impl SessionBytes {
    pub fn total(&self) -> u64 {
        self.down + self.up
    }
}

impl std::ops::Add for SessionBytes {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            down: self.down + o.down,
            up: self.up + o.up,
        }
    }
}

const HELLO: usize = frame_len(8 + 1 + 1);
const BYE: usize = frame_len(0);

pub fn weights_down_len(params: usize) -> usize {
    frame_len(8 + weights_len(params))
}

pub fn weights_up_len(params: usize) -> usize {
    frame_len(8 + weights_len(params) + 8)
}

/// Hello, one training exchange, Bye.
pub fn training_session_bytes(params: usize) -> SessionBytes {
    SessionBytes {
        down: (weights_down_len(params) + BYE) as u64,
        up: (HELLO + weights_up_len(params)) as u64,
    }
}

/// Hello and WeightsDown, after which the client vanished.
pub fn dropped_session_bytes(params: usize) -> SessionBytes {
    SessionBytes {
        down: weights_down_len(params) as u64,
        up: HELLO as u64,
    }
}

/// Hello, one evaluation exchange, Bye.
pub fn eval_session_bytes(params: usize, classification: bool) -> SessionBytes {
    let report = frame_len(8 + 8 + 1 + if classification { 8 } else { 0 });
    SessionBytes {
        down: (frame_len(8 + 4 + weights_len(params)) + BYE) as u64,
        up: (HELLO + report) as u64,
    }
}
