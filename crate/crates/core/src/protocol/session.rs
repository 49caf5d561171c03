use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use super::codec::{AbortReason, Message, PROTOCOL_VERSION};
use super::transport::{Link, LinkError, Transport};
use crate::meta::{meta_update, ClientId, Role};
use crate::nn::ModelWeights;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Server-side state of one client connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AwaitHello,
    Idle,
    /// Weights are being sent down.
    Training,
    AwaitingWeights,
    Evaluating,
    Closed,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("handshake failed: {0:?}")]
    Handshake(AbortReason),
    #[error("operation needs an idle session, found {0:?}")]
    WrongPhase(Phase),
    #[error("operation needs a {expected:?} client, connected client is {got:?}")]
    WrongRole { expected: Role, got: Role },
    #[error("no client connected before the timeout")]
    AcceptTimeout,
    #[error("server is shut down")]
    ServerClosed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundOutcome {
    /// The client reported and the meta-update was applied.
    Completed {
        weights: ModelWeights,
        local_loss: f64,
    },
    /// The round was abandoned; the caller keeps its weights.
    Aborted(AbortReason),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalOutcome {
    Completed {
        query_loss: f64,
        query_accuracy: Option<f64>,
    },
    Aborted(AbortReason),
}

/// Marks the single active session of a server. Released on drop.
#[derive(Debug)]
pub struct SlotGuard(Arc<AtomicBool>);

impl SlotGuard {
    /// Claims `slot` if it is free.
    pub fn try_claim(slot: &Arc<AtomicBool>) -> Option<Self> {
        slot.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| SlotGuard(Arc::clone(slot)))
    }
}

impl Drop for SlotGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

/// The server end of a connection with one client.
#[derive(Debug)]
pub struct ServerSession<T: Transport> {
    link: Link<T>,
    phase: Phase,
    client_id: ClientId,
    role: Role,
    last_round: Option<u64>,
    _slot: Option<SlotGuard>,
}

impl<T: Transport> ServerSession<T> {
    /// Waits for the client's Hello and checks its protocol version.
    pub fn accept(transport: T, timeout: Duration) -> Result<Self, SessionError> {
        Self::accept_in_slot(transport, timeout, None)
    }

    pub(crate) fn accept_in_slot(
        transport: T,
        timeout: Duration,
        slot: Option<SlotGuard>,
    ) -> Result<Self, SessionError> {
        let mut link = Link::new(transport);
        let fail = |link: &mut Link<T>, reason| {
            let _ = link.send(&Message::Abort { round_id: 0, reason });
            link.close();
            Err(SessionError::Handshake(reason))
        };
        if link.set_timeout(Some(timeout)).is_err() {
            return fail(&mut link, AbortReason::Disconnect);
        }
        match link.recv() {
            Ok(Message::Hello {
                client_id,
                role,
                protocol_version,
            }) => {
                if protocol_version != PROTOCOL_VERSION {
                    return fail(&mut link, AbortReason::VersionMismatch);
                }
                Ok(Self {
                    link,
                    phase: Phase::Idle,
                    client_id,
                    role,
                    last_round: None,
                    _slot: slot,
                })
            }
            Ok(_) => fail(&mut link, AbortReason::ProtocolViolation),
            Err(e) => fail(&mut link, e.abort_reason()),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn client_id(&self) -> ClientId {
        self.client_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn bytes_sent(&self) -> u64 {
        self.link.bytes_sent()
    }

    pub fn bytes_received(&self) -> u64 {
        self.link.bytes_received()
    }

    fn ready(&self, role: Role) -> Result<(), SessionError> {
        if self.phase != Phase::Idle {
            return Err(SessionError::WrongPhase(self.phase));
        }
        if self.role != role {
            return Err(SessionError::WrongRole {
                expected: role,
                got: self.role,
            });
        }
        Ok(())
    }

    fn next_round_ok(&self, round_id: u64) -> bool {
        self.last_round.map_or(true, |r| round_id > r)
    }

    /// Tells the client why, then drops the connection.
    fn abort(&mut self, round_id: u64, reason: AbortReason, notify: bool) -> AbortReason {
        if notify {
            let _ = self.link.send(&Message::Abort { round_id, reason });
        }
        self.link.close();
        self.phase = Phase::Closed;
        reason
    }

    fn failed(&mut self, round_id: u64, e: LinkError) -> AbortReason {
        let notify = matches!(e, LinkError::Codec(_) | LinkError::Timeout);
        self.abort(round_id, e.abort_reason(), notify)
    }

    /// One serial training round: send `phi`, wait for the client's adapted
    /// weights, return `phi + alpha * (phi_hat - phi)`. Any failure aborts the
    /// round and closes the session.
    pub fn serve_round(
        &mut self,
        phi: &ModelWeights,
        round_id: u64,
        alpha: f64,
    ) -> Result<RoundOutcome, SessionError> {
        self.ready(Role::Training)?;
        if !self.next_round_ok(round_id) {
            return Err(SessionError::WrongPhase(self.phase));
        }
        self.last_round = Some(round_id);
        self.phase = Phase::Training;
        let down = Message::WeightsDown {
            round_id,
            weights: phi.values().to_vec(),
        };
        if let Err(e) = self.link.send(&down) {
            return Ok(RoundOutcome::Aborted(self.failed(round_id, e)));
        }
        self.phase = Phase::AwaitingWeights;
        let reply = match self.link.recv() {
            Ok(m) => m,
            Err(e) => return Ok(RoundOutcome::Aborted(self.failed(round_id, e))),
        };
        let outcome = match reply {
            Message::WeightsUp {
                round_id: r,
                weights,
                local_loss,
            } if r == round_id => match ModelWeights::from_values(phi.shape().clone(), weights)
                .ok()
                .and_then(|hat| meta_update(phi, &hat, alpha).ok())
            {
                Some(weights) => RoundOutcome::Completed {
                    weights,
                    local_loss,
                },
                None => RoundOutcome::Aborted(self.abort(round_id, AbortReason::ProtocolViolation, true)),
            },
            Message::Abort { reason, .. } => RoundOutcome::Aborted(self.abort(round_id, reason, false)),
            _ => RoundOutcome::Aborted(self.abort(round_id, AbortReason::ProtocolViolation, true)),
        };
        if matches!(outcome, RoundOutcome::Completed { .. }) {
            self.phase = Phase::Idle;
        }
        Ok(outcome)
    }

    /// Asks a testing client to fine-tune `phi` for `k` passes and report its
    /// query loss.
    pub fn serve_eval(
        &mut self,
        phi: &ModelWeights,
        round_id: u64,
        k: u32,
    ) -> Result<EvalOutcome, SessionError> {
        self.ready(Role::Testing)?;
        self.phase = Phase::Evaluating;
        let req = Message::EvalRequest {
            round_id,
            k,
            weights: phi.values().to_vec(),
        };
        if let Err(e) = self.link.send(&req) {
            return Ok(EvalOutcome::Aborted(self.failed(round_id, e)));
        }
        let outcome = match self.link.recv() {
            Ok(Message::EvalReport {
                round_id: r,
                query_loss,
                query_accuracy,
            }) if r == round_id => EvalOutcome::Completed {
                query_loss,
                query_accuracy,
            },
            Ok(Message::Abort { reason, .. }) => EvalOutcome::Aborted(self.abort(round_id, reason, false)),
            Ok(_) => EvalOutcome::Aborted(self.abort(round_id, AbortReason::ProtocolViolation, true)),
            Err(e) => EvalOutcome::Aborted(self.failed(round_id, e)),
        };
        if matches!(outcome, EvalOutcome::Completed { .. }) {
            self.phase = Phase::Idle;
        }
        Ok(outcome)
    }

    /// Sends Bye and closes. Returns (bytes sent, bytes received).
    pub fn close(mut self) -> (u64, u64) {
        if self.phase != Phase::Closed {
            let _ = self.link.send(&Message::Bye);
            self.link.close();
            self.phase = Phase::Closed;
        }
        (self.link.bytes_sent(), self.link.bytes_received())
    }
}
