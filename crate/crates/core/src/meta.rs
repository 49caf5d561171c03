//! Initialization-learning algorithms and the fine-tune-then-score
//! evaluation they are judged by.
//!
//! * [`tinyreptile_round`]: one client, one streaming pass with a single SGD
//!   update per arriving sample, then an interpolation of the server weights
//!   toward the client's result.
//! * [`reptile_local_train`] / [`reptile_serial_round`]: the same outer step
//!   with `E` full-batch epochs over a stored support set.
//! * [`reptile_batched_round`], [`fedavg_round`], [`fedsgd_round`]: several
//!   clients per round, merged on the server.
//! * [`joint_training_baseline`]: one model fitted to the union of all client
//!   data with no per-client adaptation.
//!
//! Server-side merges of multi-client rounds sort client results by id before
//! reducing, so the outcome does not depend on completion order.

use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, batch_backward, sample_loss, sgd_step, Gradient, ModelWeights, NnError, Real, Sample};
use crate::seeds;
use crate::tasks::{SampleStream, SupportQuerySplit, TaskFamily, TaskSpec};

pub type ClientId = u64;

const DROPOUT_TAG: u64 = 0xD80F;
const VISIT_TAG: u64 = 0x7151;
const SHUFFLE_TAG: u64 = 0x5348;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("client {0} has an empty support set")]
    EmptySupport(ClientId),
    #[error("no clients supplied")]
    NoClients,
    #[error("client {client} has role {role:?}, expected {expected:?}")]
    WrongRole {
        client: ClientId,
        role: Role,
        expected: Role,
    },
    #[error("client {0} dropped out; round aborted")]
    ClientDropped(ClientId),
    #[error("every client dropped out; round aborted")]
    AllClientsDropped,
    #[error("invalid algorithm config: {0}")]
    InvalidConfig(String),
    #[error("client {0} has no query set")]
    NoQuery(ClientId),
}

/// How a copy of the initialization is adapted to a support set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Each pass feeds the samples one by one, one SGD update per sample.
    Streaming,
    /// Each pass is one SGD update on the mean gradient of the whole support.
    Batched,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    /// Server (outer) learning rate.
    pub alpha: f64,
    /// Client (inner) learning rate.
    pub beta: f64,
    /// Fine-tuning passes at evaluation time.
    pub k: usize,
    /// Local epochs for batched local training.
    pub epochs: usize,
    pub clients_per_round: usize,
    /// Mini-batch size of the joint baseline; `None` means full batch.
    pub joint_batch: Option<usize>,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.01,
            k: 8,
            epochs: 8,
            clients_per_round: 5,
            joint_batch: Some(32),
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |m: String| Err(MetaError::InvalidConfig(m));
        if !(self.alpha >= 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.clients_per_round == 0 {
            return bad("clients_per_round must be at least 1".into());
        }
        if self.joint_batch == Some(0) {
            return bad("joint_batch must be at least 1".into());
        }
        Ok(())
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub(crate) fn beta_f32(&self) -> f32 {
        self.beta as f32
    }
}

/// Linearly decayed server learning rate: `alpha * (1 - round / total)` for
/// 0-based `round`.
pub fn decayed_alpha(alpha: f64, round: u64, total: u64) -> f64 {
    if total == 0 {
        return alpha;
    }
    alpha * (1.0 - round as f64 / total as f64).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Training,
    Testing,
}

#[derive(Debug, Clone)]
enum ClientData {
    /// Fresh samples are drawn from the task on every visit.
    Sensor {
        family: Arc<TaskFamily>,
        task: TaskSpec,
        support: usize,
    },
    /// A fixed dataset.
    Fixed(SupportQuerySplit),
}

/// One participating device: an identity, a role, and access to its data.
#[derive(Debug, Clone)]
pub struct ClientHandle {
    pub id: ClientId,
    pub role: Role,
    seed: u64,
    dropout: f64,
    data: ClientData,
}

impl ClientHandle {
    /// A device that samples a new support set of `support` (samples for
    /// regression, shots for classification) from its task on every visit.
    pub fn sensor(
        id: ClientId,
        role: Role,
        family: Arc<TaskFamily>,
        task: TaskSpec,
        support: usize,
        seed: u64,
    ) -> Self {
        Self {
            id,
            role,
            seed,
            dropout: 0.0,
            data: ClientData::Sensor {
                family,
                task,
                support,
            },
        }
    }

    /// A device holding a fixed support/query split.
    pub fn fixed(id: ClientId, role: Role, split: SupportQuerySplit, seed: u64) -> Self {
        Self {
            id,
            role,
            seed,
            dropout: 0.0,
            data: ClientData::Fixed(split),
        }
    }

    /// Probability that the device disappears in the middle of a round.
    pub fn with_dropout(mut self, probability: f64) -> Self {
        self.dropout = probability;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Whether this client drops out during `round`; deterministic in the
    /// client seed.
    pub fn drops_out(&self, round: u64) -> bool {
        self.dropout > 0.0
            && seeds::rng(seeds::derive_path(self.seed, &[DROPOUT_TAG, round])).gen::<f64>() < self.dropout
    }

    /// Support stream for a training visit in `round`.
    pub fn support_stream(&self, round: u64) -> SampleStream<'_> {
        let seed = seeds::derive_path(self.seed, &[VISIT_TAG, round]);
        match &self.data {
            ClientData::Sensor {
                family,
                task,
                support,
            } => family.stream(task, family.support_len(*support), seed),
            ClientData::Fixed(split) => split.stream(seed),
        }
    }

    /// The stored split, if the client holds one.
    pub fn split(&self) -> Option<&SupportQuerySplit> {
        match &self.data {
            ClientData::Fixed(split) => Some(split),
            ClientData::Sensor { .. } => None,
        }
    }

    /// Support samples of the visit in `round`, materialized.
    pub fn support_batch(&self, round: u64) -> Vec<Sample> {
        self.support_stream(round).collect()
    }

    fn expect_role(&self, expected: Role) -> Result<(), MetaError> {
        if self.role == expected {
            Ok(())
        } else {
            Err(MetaError::WrongRole {
                client: self.id,
                role: self.role,
                expected,
            })
        }
    }
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub weights: ModelWeights,
    /// Mean loss over the last pass, measured before each update.
    pub local_loss: f64,
    /// Largest number of support samples held at once.
    pub resident_samples: usize,
    pub updates: usize,
}

/// One pass over `stream`, one SGD update per sample. Only the sample being
/// processed is alive at any time.
pub fn streaming_local_train<I>(
    mut weights: ModelWeights,
    stream: I,
    beta: f32,
) -> Result<LocalOutcome, NnError>
where
    I: IntoIterator<Item = Sample>,
{
    let mut loss_sum = 0.0;
    let mut updates = 0;
    for sample in stream {
        let out = nn::backward(&weights, &sample.x, &sample.y)?;
        drop(sample);
        weights = sgd_step(weights, &out.gradient, beta)?;
        loss_sum += out.loss;
        updates += 1;
    }
    Ok(LocalOutcome {
        weights,
        local_loss: if updates == 0 { 0.0 } else { loss_sum / updates as f64 },
        resident_samples: updates.min(1),
        updates,
    })
}

/// Stacks the whole stream, then runs `epochs` full-batch SGD steps on it.
pub fn batched_local_train<I>(
    mut weights: ModelWeights,
    stream: I,
    epochs: usize,
    beta: f32,
) -> Result<LocalOutcome, NnError>
where
    I: IntoIterator<Item = Sample>,
    I::IntoIter: ExactSizeIterator,
{
    let stream = stream.into_iter();
    let mut support = Vec::with_capacity(stream.len());
    support.extend(stream);
    if support.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let mut local_loss = 0.0;
    for _ in 0..epochs {
        let out = batch_backward(&weights, &support)?;
        weights = sgd_step(weights, &out.gradient, beta)?;
        local_loss = out.loss;
    }
    Ok(LocalOutcome {
        weights,
        local_loss,
        resident_samples: support.len(),
        updates: epochs,
    })
}

/// `phi + alpha * (phi_hat - phi)`, evaluated in `f64` as
/// `(1 - alpha) * phi + alpha * phi_hat` so both endpoints are exact.
pub fn meta_update<T: Real>(
    phi: &ModelWeights<T>,
    phi_hat: &ModelWeights<T>,
    alpha: f64,
) -> Result<ModelWeights<T>, NnError> {
    if phi.len() != phi_hat.len() {
        return Err(NnError::DimensionMismatch {
            what: "meta update",
            expected: phi.len(),
            got: phi_hat.len(),
        });
    }
    let keep = 1.0 - alpha;
    let values = phi
        .values()
        .iter()
        .zip(phi_hat.values())
        .map(|(&p, &h)| {
            let p = p.to_f64().unwrap_or(f64::NAN);
            let h = h.to_f64().unwrap_or(f64::NAN);
            T::from_f64_lossy(keep * p + alpha * h)
        })
        .collect();
    ModelWeights::from_values(Arc::clone(phi.shape()), values)
}

/// One TinyReptile round against a single training client.
///
/// The client receives `phi`, takes one SGD step per streamed support sample
/// and returns its weights; the server moves `phi` toward them by
/// `cfg.alpha`. A client that drops out yields
/// [`MetaError::ClientDropped`] and `phi` is left as it was.
pub fn tinyreptile_round(
    phi: &ModelWeights,
    client: &ClientHandle,
    round: u64,
    cfg: &AlgoConfig,
) -> Result<ModelWeights, MetaError> {
    client.expect_role(Role::Training)?;
    if client.drops_out(round) {
        return Err(MetaError::ClientDropped(client.id));
    }
    let local = streaming_local_train(phi.clone(), client.support_stream(round), cfg.beta_f32())?;
    Ok(meta_update(phi, &local.weights, cfg.alpha)?)
}

/// Reptile's client step: `E` full-batch epochs over the stored support.
pub fn reptile_local_train(
    phi: &ModelWeights,
    client: &ClientHandle,
    round: u64,
    cfg: &AlgoConfig,
) -> Result<ModelWeights, MetaError> {
    let stream = client.support_stream(round);
    if stream.len() == 0 {
        return Err(MetaError::EmptySupport(client.id));
    }
    Ok(batched_local_train(phi.clone(), stream, cfg.epochs, cfg.beta_f32())?.weights)
}

/// Serial Reptile: one client per round, batched local training.
pub fn reptile_serial_round(
    phi: &ModelWeights,
    client: &ClientHandle,
    round: u64,
    cfg: &AlgoConfig,
) -> Result<ModelWeights, MetaError> {
    client.expect_role(Role::Training)?;
    if client.drops_out(round) {
        return Err(MetaError::ClientDropped(client.id));
    }
    let phi_hat = reptile_local_train(phi, client, round, cfg)?;
    Ok(meta_update(phi, &phi_hat, cfg.alpha)?)
}

/// Runs `work` for every surviving client (in parallel when there are
/// several) and returns results sorted by client id.
fn per_client<R, F>(clients: &[ClientHandle], round: u64, work: F) -> Result<Vec<R>, MetaError>
where
    R: Send,
    F: Fn(&ClientHandle) -> Result<R, MetaError> + Sync,
{
    if clients.is_empty() {
        return Err(MetaError::NoClients);
    }
    for c in clients {
        c.expect_role(Role::Training)?;
    }
    let mut alive: Vec<&ClientHandle> = clients.iter().filter(|c| !c.drops_out(round)).collect();
    if alive.is_empty() {
        return Err(MetaError::AllClientsDropped);
    }
    alive.sort_by_key(|c| c.id);
    if alive.len() == 1 {
        return Ok(vec![work(alive[0])?]);
    }
    thread::scope(|scope| {
        let handles: Vec<_> = alive.iter().map(|c| scope.spawn(|| work(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client worker panicked"))
            .collect()
    })
}

fn mean_weights(template: &ModelWeights, parts: &[ModelWeights]) -> Result<ModelWeights, NnError> {
    let mut acc = vec![0.0f64; template.len()];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p.values()) {
            *a += *v as f64;
        }
    }
    let n = parts.len() as f64;
    ModelWeights::from_values(
        Arc::clone(template.shape()),
        acc.into_iter().map(|a| (a / n) as f32).collect(),
    )
}

/// Batched Reptile: every client trains from `phi`; the server moves toward
/// the mean of their results.
pub fn reptile_batched_round(
    phi: &ModelWeights,
    clients: &[ClientHandle],
    round: u64,
    cfg: &AlgoConfig,
) -> Result<ModelWeights, MetaError> {
    let results = per_client(clients, round, |c| reptile_local_train(phi, c, round, cfg))?;
    let mean = mean_weights(phi, &results)?;
    Ok(meta_update(phi, &mean, cfg.alpha)?)
}

/// FedAVG: every client trains `E` epochs from `phi`; the new global model is
/// the equal-weight mean of their results.
pub fn fedavg_round(
    phi: &ModelWeights,
    clients: &[ClientHandle],
    round: u64,
    cfg: &AlgoConfig,
) -> Result<ModelWeights, MetaError> {
    let results = per_client(clients, round, |c| reptile_local_train(phi, c, round, cfg))?;
    Ok(mean_weights(phi, &results)?)
}

/// FedSGD: every client reports one full-batch gradient at `phi`; the server
/// takes one SGD step along their mean.
pub fn fedsgd_round(
    phi: &ModelWeights,
    clients: &[ClientHandle],
    round: u64,
    cfg: &AlgoConfig,
) -> Result<ModelWeights, MetaError> {
    let grads = per_client(clients, round, |c| {
        let support = c.support_batch(round);
        if support.is_empty() {
            return Err(MetaError::EmptySupport(c.id));
        }
        Ok(batch_backward(phi, &support)?.gradient)
    })?;
    let mut acc = vec![0.0f64; phi.len()];
    for g in &grads {
        for (a, v) in acc.iter_mut().zip(g.values()) {
            *a += *v as f64;
        }
    }
    let n = grads.len() as f64;
    let mean = Gradient::from_values(acc.into_iter().map(|a| (a / n) as f32).collect())?;
    Ok(sgd_step(phi.clone(), &mean, cfg.beta_f32())?)
}

/// One epoch of mini-batch SGD over the pooled supports of `clients` (their
/// visit in `round`), shuffled with `seed`.
pub fn joint_round(
    phi: &ModelWeights,
    clients: &[ClientHandle],
    round: u64,
    cfg: &AlgoConfig,
    seed: u64,
) -> Result<ModelWeights, MetaError> {
    joint_round_with_visit(phi, clients, round, round, cfg, seed)
}

/// Plain SGD on the union of all clients' data for `epochs` epochs, fitting a
/// single model to every task at once.
pub fn joint_training_baseline(
    phi: &ModelWeights,
    clients: &[ClientHandle],
    cfg: &AlgoConfig,
    epochs: usize,
    seed: u64,
) -> Result<ModelWeights, MetaError> {
    let mut w = phi.clone();
    for epoch in 0..epochs as u64 {
        // The same data every epoch: visit 0 of each client.
        w = joint_round_with_visit(&w, clients, 0, epoch, cfg, seed)?;
    }
    Ok(w)
}

fn joint_round_with_visit(
    phi: &ModelWeights,
    clients: &[ClientHandle],
    visit: u64,
    epoch: u64,
    cfg: &AlgoConfig,
    seed: u64,
) -> Result<ModelWeights, MetaError> {
    if clients.is_empty() {
        return Err(MetaError::NoClients);
    }
    let mut pool: Vec<Sample> = clients.iter().flat_map(|c| c.support_stream(visit)).collect();
    if pool.is_empty() {
        return Err(MetaError::EmptySupport(clients[0].id));
    }
    pool.shuffle(&mut seeds::rng(seeds::derive_path(seed, &[SHUFFLE_TAG, epoch])));
    let batch = cfg.joint_batch.unwrap_or(pool.len());
    let mut w = phi.clone();
    for chunk in pool.chunks(batch) {
        let out = batch_backward(&w, chunk)?;
        w = sgd_step(w, &out.gradient, cfg.beta_f32())?;
    }
    Ok(w)
}

/// Fine-tuned weights plus whether the adaptation was skipped for lack of
/// data.
#[derive(Debug, Clone, PartialEq)]
pub struct Finetuned {
    pub weights: ModelWeights,
    pub zero_shot: bool,
}

/// Adapts `phi` to `support` with `k` passes in the given mode. `k = 0` or an
/// empty support returns `phi` unchanged (zero-shot).
pub fn finetune(
    phi: &ModelWeights,
    support: &[Sample],
    k: usize,
    beta: f32,
    mode: FinetuneMode,
) -> Result<Finetuned, NnError> {
    if k == 0 || support.is_empty() {
        return Ok(Finetuned {
            weights: phi.clone(),
            zero_shot: true,
        });
    }
    let mut w = phi.clone();
    for _ in 0..k {
        w = match mode {
            FinetuneMode::Streaming => {
                let mut w = w;
                for s in support {
                    let out = nn::backward(&w, &s.x, &s.y)?;
                    w = sgd_step(w, &out.gradient, beta)?;
                }
                w
            }
            FinetuneMode::Batched => {
                let out = batch_backward(&w, support)?;
                sgd_step(w, &out.gradient, beta)?
            }
        };
    }
    Ok(Finetuned {
        weights: w,
        zero_shot: false,
    })
}

/// Mean loss over `samples` and, for classifiers, the fraction whose argmax
/// (lowest index on ties) matches the target's.
pub fn score(w: &ModelWeights, samples: &[Sample]) -> Result<(f64, Option<f64>), NnError> {
    let classify = w.shape().loss() == nn::Loss::CrossEntropy;
    let mut loss = 0.0;
    let mut hits = 0usize;
    for s in samples {
        let (l, out) = sample_loss(w, &s.x, &s.y)?;
        loss += l;
        if classify && argmax(&out) == argmax(&s.y) {
            hits += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, classify.then(|| hits as f64 / n)))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One testing client's fine-tuned query score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientScore {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub zero_shot: bool,
}

/// Fine-tunes on the client's support, then scores on its query.
pub fn evaluate_client(
    phi: &ModelWeights,
    client: &ClientHandle,
    k: usize,
    beta: f32,
    mode: FinetuneMode,
) -> Result<ClientScore, MetaError> {
    let split = client.split().ok_or(MetaError::NoQuery(client.id))?;
    if split.query.is_empty() {
        return Err(MetaError::NoQuery(client.id));
    }
    let tuned = finetune(phi, &split.support, k, beta, mode)?;
    let (loss, accuracy) = score(&tuned.weights, &split.query)?;
    Ok(ClientScore {
        loss,
        accuracy,
        zero_shot: tuned.zero_shot,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_query_loss: f64,
    pub mean_query_accuracy: Option<f64>,
    pub per_client_losses: Vec<f64>,
    pub k_used: usize,
    pub s_testing_used: usize,
    /// True when no client could adapt (k = 0 or empty supports).
    pub zero_shot: bool,
}

impl EvalReport {
    /// Aggregates per-client scores in the order given.
    pub fn from_scores(scores: &[ClientScore], k: usize, s_testing: usize) -> Self {
        let n = scores.len() as f64;
        let per_client_losses: Vec<f64> = scores.iter().map(|s| s.loss).collect();
        let mean_query_accuracy = scores
            .iter()
            .map(|s| s.accuracy)
            .collect::<Option<Vec<f64>>>()
            .map(|a| a.iter().sum::<f64>() / n);
        Self {
            mean_query_loss: per_client_losses.iter().sum::<f64>() / n,
            mean_query_accuracy,
            per_client_losses,
            k_used: k,
            s_testing_used: s_testing,
            zero_shot: scores.iter().all(|s| s.zero_shot),
        }
    }
}

/// The meta-learning objective: fine-tune on every testing client's support
/// and average the query losses.
pub fn evaluate_meta(
    phi: &ModelWeights,
    testing: &[ClientHandle],
    cfg: &AlgoConfig,
    mode: FinetuneMode,
) -> Result<EvalReport, MetaError> {
    if testing.is_empty() {
        return Err(MetaError::NoClients);
    }
    let mut scores = Vec::with_capacity(testing.len());
    for c in testing {
        c.expect_role(Role::Testing)?;
        scores.push(evaluate_client(phi, c, cfg.k, cfg.beta_f32(), mode)?);
    }
    let s_testing = testing[0].split().map_or(0, |s| s.support.len());
    Ok(EvalReport::from_scores(&scores, cfg.k, s_testing))
}

/// Chooses which training clients take part in a round.
pub trait ClientSampler: Send {
    /// Indices of `n` distinct clients out of `population`.
    fn sample(&mut self, population: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize>;
}

/// Uniform sampling without replacement.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformSampler;

impl ClientSampler for UniformSampler {
    fn sample(&mut self, population: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if n == 1 {
            return vec![rng.gen_range(0..population)];
        }
        rand::seq::index::sample(rng, population, n.min(population)).into_vec()
    }
}

/// Cycles through the clients in order, ignoring the generator.
#[derive(Debug, Clone, Copy, Default)]
pub struct RoundRobinSampler {
    next: usize,
}

impl ClientSampler for RoundRobinSampler {
    fn sample(&mut self, population: usize, n: usize, _rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..n.min(population))
            .map(|_| {
                let i = self.next % population;
                self.next += 1;
                i
            })
            .collect()
    }
}
