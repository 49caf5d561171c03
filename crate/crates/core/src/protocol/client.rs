use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::codec::{AbortReason, Message, PROTOCOL_VERSION};
use super::session::DEFAULT_TIMEOUT;
use super::transport::{Link, LinkError, Transport};
use crate::meta::{batched_local_train, evaluate_client, streaming_local_train, ClientHandle, FinetuneMode, MetaError};
use crate::nn::{ModelConfig, ModelWeights};

/// How the client adapts weights it receives for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalTraining {
    /// One pass, one SGD step per streamed sample.
    Streaming,
    /// Store the support, then `epochs` full-batch steps.
    Batched { epochs: usize },
}

/// Misbehaviour injected into a client, for exercising the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Vanish right after receiving weights.
    DisconnectAfterWeights,
    /// Answer with a round id that is not the current one.
    StaleRoundId,
    /// Sleep this long before answering.
    Stall(Duration),
    /// Flip a payload bit in the reply.
    CorruptReply,
    /// Announce this protocol version in Hello.
    Version(u8),
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub beta: f32,
    pub local: LocalTraining,
    pub eval_mode: FinetuneMode,
    pub timeout: Duration,
    pub fault: Option<Fault>,
}

impl ClientConfig {
    pub fn streaming(beta: f32) -> Self {
        Self {
            beta,
            local: LocalTraining::Streaming,
            eval_mode: FinetuneMode::Streaming,
            timeout: DEFAULT_TIMEOUT,
            fault: None,
        }
    }

    pub fn batched(beta: f32, epochs: usize) -> Self {
        Self {
            local: LocalTraining::Batched { epochs },
            eval_mode: FinetuneMode::Batched,
            ..Self::streaming(beta)
        }
    }
}

/// How a client session ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientEnd {
    Bye,
    /// The server aborted.
    Aborted(AbortReason),
    /// The client dropped out by itself.
    DroppedOut,
    /// The server went away without Bye.
    Disconnected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientStats {
    pub rounds_trained: usize,
    pub evaluations: usize,
    /// Most support samples held at once during local training.
    pub resident_high_water: usize,
    pub local_train_seconds: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub end: ClientEnd,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Meta(#[from] MetaError),
}

/// Serves one connection: Hello, then local training for every WeightsDown
/// and fine-tune-and-score for every EvalRequest, until Bye.
pub fn client_loop<T: Transport>(
    transport: T,
    client: &ClientHandle,
    model: &Arc<ModelConfig>,
    cfg: &ClientConfig,
) -> Result<ClientStats, ClientError> {
    let mut link = Link::new(transport);
    link.set_timeout(Some(cfg.timeout))?;
    let mut stats = ClientStats {
        rounds_trained: 0,
        evaluations: 0,
        resident_high_water: 0,
        local_train_seconds: 0.0,
        bytes_sent: 0,
        bytes_received: 0,
        end: ClientEnd::Bye,
    };
    let result = serve(&mut link, client, model, cfg, &mut stats);
    stats.bytes_sent = link.bytes_sent();
    stats.bytes_received = link.bytes_received();
    match result {
        Ok(end) => {
            stats.end = end;
            Ok(stats)
        }
        Err(ClientError::Link(LinkError::Disconnected)) => {
            stats.end = ClientEnd::Disconnected;
            Ok(stats)
        }
        Err(e) => {
            let reason = match &e {
                ClientError::Link(l) => l.abort_reason(),
                ClientError::Meta(_) => AbortReason::ClientError,
            };
            let _ = link.send(&Message::Abort {
                round_id: 0,
                reason,
            });
            link.close();
            Err(e)
        }
    }
}

fn serve<T: Transport>(
    link: &mut Link<T>,
    client: &ClientHandle,
    model: &Arc<ModelConfig>,
    cfg: &ClientConfig,
    stats: &mut ClientStats,
) -> Result<ClientEnd, ClientError> {
    let version = match cfg.fault {
        Some(Fault::Version(v)) => v,
        _ => PROTOCOL_VERSION,
    };
    link.send(&Message::Hello {
        client_id: client.id,
        role: client.role,
        protocol_version: version,
    })?;
    loop {
        let reply = match link.recv()? {
            Message::WeightsDown { round_id, weights } => {
                if client.drops_out(round_id) || cfg.fault == Some(Fault::DisconnectAfterWeights) {
                    link.close();
                    return Ok(ClientEnd::DroppedOut);
                }
                let phi = ModelWeights::from_values(Arc::clone(model), weights).map_err(MetaError::from)?;
                let start = Instant::now();
                let local = match cfg.local {
                    LocalTraining::Streaming => {
                        streaming_local_train(phi, client.support_stream(round_id), cfg.beta)
                    }
                    LocalTraining::Batched { epochs } => {
                        batched_local_train(phi, client.support_stream(round_id), epochs, cfg.beta)
                    }
                }
                .map_err(MetaError::from)?;
                stats.local_train_seconds += start.elapsed().as_secs_f64();
                stats.rounds_trained += 1;
                stats.resident_high_water = stats.resident_high_water.max(local.resident_samples);
                Message::WeightsUp {
                    round_id,
                    weights: local.weights.into_values(),
                    local_loss: local.local_loss,
                }
            }
            Message::EvalRequest {
                round_id,
                k,
                weights,
            } => {
                let phi = ModelWeights::from_values(Arc::clone(model), weights).map_err(MetaError::from)?;
                let score = evaluate_client(&phi, client, k as usize, cfg.beta, cfg.eval_mode)?;
                stats.evaluations += 1;
                Message::EvalReport {
                    round_id,
                    query_loss: score.loss,
                    query_accuracy: score.accuracy,
                }
            }
            Message::Bye => return Ok(ClientEnd::Bye),
            Message::Abort { reason, .. } => return Ok(ClientEnd::Aborted(reason)),
            Message::Hello { .. } | Message::WeightsUp { .. } | Message::EvalReport { .. } => {
                link.send(&Message::Abort {
                    round_id: 0,
                    reason: AbortReason::ProtocolViolation,
                })?;
                link.close();
                return Ok(ClientEnd::Aborted(AbortReason::ProtocolViolation));
            }
        };
        send_reply(link, reply, cfg.fault)?;
    }
}

fn send_reply<T: Transport>(link: &mut Link<T>, reply: Message, fault: Option<Fault>) -> Result<(), LinkError> {
    match fault {
        Some(Fault::StaleRoundId) => {
            let reply = match reply {
                Message::WeightsUp {
                    round_id,
                    weights,
                    local_loss,
                } => Message::WeightsUp {
                    round_id: round_id.wrapping_sub(1),
                    weights,
                    local_loss,
                },
                Message::EvalReport {
                    round_id,
                    query_loss,
                    query_accuracy,
                } => Message::EvalReport {
                    round_id: round_id.wrapping_sub(1),
                    query_loss,
                    query_accuracy,
                },
                other => other,
            };
            link.send(&reply)
        }
        Some(Fault::Stall(d)) => {
            thread::sleep(d);
            link.send(&reply)
        }
        Some(Fault::CorruptReply) => {
            let mut bytes = super::codec::encode(&reply);
            bytes[super::codec::HEADER_LEN] ^= 0x01;
            link.send_raw(&bytes)
        }
        _ => link.send(&reply),
    }
}
