use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::config::{Algorithm, ExperimentConfig, SamplerKind, TaskKind, TransportKind};
use super::HarnessError;
use crate::meta::{
    evaluate_meta, fedavg_round, fedsgd_round, joint_round, reptile_batched_round, ClientHandle, ClientSampler,
    MetaError, Role, RoundRobinSampler, UniformSampler,
};
use crate::nn::{init_weights, ModelConfig, ModelWeights};
use crate::protocol::{
    self, channel_pair, client_loop, ClientConfig, ClientError, ClientStats, EvalOutcome,
    RoundOutcome, ServerSession, SessionBytes, SessionError, TcpServer, Transport,
};
use crate::seeds;
use crate::tasks::{PrototypeBank, TaskFamily};

const REPEAT_TAG: u64 = 0x5245;
const INIT_TAG: u64 = 0x1417;
const BANK_TAG: u64 = 0xBA4C;
const TRAIN_TASK_TAG: u64 = 0x7A51;
const TRAIN_DATA_TAG: u64 = 0x7DA7;
const TEST_TASK_TAG: u64 = 0x7E57;
const TEST_DATA_TAG: u64 = 0x7ED7;
const SAMPLER_TAG: u64 = 0x5A3B;
const JOINT_TAG: u64 = 0x1017;

/// What happened in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    /// Wall-clock seconds of client-side training.
    pub local_train_seconds: f64,
    /// Training traffic, server to clients.
    pub bytes_down: u64,
    /// Training traffic, clients to server.
    pub bytes_up: u64,
    /// Evaluation traffic, both directions.
    pub eval_bytes: u64,
    pub aborted: bool,
}

impl RoundRecord {
    fn empty(round: u64) -> Self {
        Self {
            round,
            eval_loss: None,
            eval_accuracy: None,
            local_train_seconds: 0.0,
            bytes_down: 0,
            bytes_up: 0,
            eval_bytes: 0,
            aborted: false,
        }
    }

    pub fn comm_bytes(&self) -> u64 {
        self.bytes_down + self.bytes_up + self.eval_bytes
    }
}

/// Records and final weights of one repeat.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub repeat: usize,
    pub records: Vec<RoundRecord>,
    pub final_weights: ModelWeights,
}

/// Mean fine-tuned query metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSummary {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub bytes: u64,
    /// Some testing client could not be reached.
    pub incomplete: bool,
}

/// One repeat of an experiment, advanced a round at a time.
pub struct Experiment {
    cfg: ExperimentConfig,
    model: Arc<ModelConfig>,
    training: Vec<ClientHandle>,
    testing: Vec<ClientHandle>,
    phi: ModelWeights,
    sampler: Box<dyn ClientSampler>,
    rng: ChaCha8Rng,
    seed: u64,
    round: u64,
    tcp: Option<TcpServer>,
}

impl std::fmt::Debug for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Experiment")
            .field("algorithm", &self.cfg.algorithm)
            .field("round", &self.round)
            .finish_non_exhaustive()
    }
}

/// Seed of repeat `repeat` under `master_seed`.
pub fn repeat_seed(master_seed: u64, repeat: usize) -> u64 {
    seeds::derive_path(master_seed, &[REPEAT_TAG, repeat as u64])
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig, repeat: usize) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let seed = repeat_seed(cfg.master_seed, repeat);
        let model = Arc::new(cfg.model());
        let family = Arc::new(match cfg.task {
            TaskKind::Sine => TaskFamily::Sine(cfg.sine),
            TaskKind::SyntheticFewShot => TaskFamily::FewShot {
                bank: Arc::new(PrototypeBank::generate(
                    cfg.few_shot.classes,
                    cfg.few_shot.dim,
                    seeds::derive(seed, BANK_TAG),
                )),
                ways: cfg.few_shot.ways,
                noise: cfg.few_shot.noise,
            },
        });
        let task_err = |e: crate::tasks::TaskError| HarnessError::invalid("task", e.to_string());

        let mut training = Vec::with_capacity(cfg.training_clients);
        for i in 0..cfg.training_clients as u64 {
            let task = family
                .sample_task(seeds::derive_path(seed, &[TRAIN_TASK_TAG, i]))
                .map_err(task_err)?;
            let client = ClientHandle::sensor(
                i,
                Role::Training,
                Arc::clone(&family),
                task,
                cfg.s_training,
                seeds::derive_path(seed, &[TRAIN_DATA_TAG, i]),
            );
            training.push(client.with_dropout(cfg.dropout));
        }

        let mut testing = Vec::with_capacity(cfg.testing_clients);
        for j in 0..cfg.testing_clients as u64 {
            let task = family
                .sample_task(seeds::derive_path(seed, &[TEST_TASK_TAG, j]))
                .map_err(task_err)?;
            let data_seed = seeds::derive_path(seed, &[TEST_DATA_TAG, j]);
            let split = family.realize(&task, cfg.s_testing, cfg.q, data_seed).map_err(task_err)?;
            testing.push(ClientHandle::fixed(
                cfg.training_clients as u64 + j,
                Role::Testing,
                split,
                data_seed,
            ));
        }

        let sampler: Box<dyn ClientSampler> = match cfg.sampler {
            SamplerKind::Uniform => Box::new(UniformSampler),
            SamplerKind::RoundRobin => Box::new(RoundRobinSampler::default()),
        };
        let tcp = match &cfg.transport {
            TransportKind::InProcess => None,
            TransportKind::Tcp { address } => Some(
                TcpServer::bind(address.as_str(), cfg.timeout())
                    .map_err(|e| HarnessError::Transport(format!("cannot listen on {address}: {e}")))?,
            ),
        };

        Ok(Self {
            phi: init_weights(&model, seeds::derive(seed, INIT_TAG)),
            cfg: cfg.clone(),
            model,
            training,
            testing,
            sampler,
            rng: seeds::rng(seeds::derive(seed, SAMPLER_TAG)),
            seed,
            round: 0,
            tcp,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn phi(&self) -> &ModelWeights {
        &self.phi
    }

    /// Last completed round; 0 before any training.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn training_clients(&self) -> &[ClientHandle] {
        &self.training
    }

    pub fn testing_clients(&self) -> &[ClientHandle] {
        &self.testing
    }

    /// Record of round 0: an evaluation of the initialization.
    pub fn initial_record(&mut self) -> Result<RoundRecord, HarnessError> {
        let mut rec = RoundRecord::empty(0);
        self.attach_eval(&mut rec)?;
        Ok(rec)
    }

    /// Trains one round, then evaluates if the round is on the schedule.
    pub fn step(&mut self) -> Result<RoundRecord, HarnessError> {
        let round = self.round + 1;
        let mut rec = RoundRecord::empty(round);
        if self.cfg.algorithm.is_serial() {
            self.serial_round(round, &mut rec)?;
        } else {
            self.multi_client_round(round, &mut rec)?;
        }
        self.round = round;
        if round % self.cfg.eval_every == 0 {
            self.attach_eval(&mut rec)?;
        }
        Ok(rec)
    }

    /// Runs every remaining round.
    pub fn run(mut self, repeat: usize) -> Result<RunResult, HarnessError> {
        let mut records = Vec::with_capacity(self.cfg.rounds as usize + 1);
        if self.round == 0 {
            records.push(self.initial_record()?);
        }
        while self.round < self.cfg.rounds {
            records.push(self.step()?);
        }
        Ok(RunResult {
            repeat,
            records,
            final_weights: self.phi,
        })
    }

    fn attach_eval(&mut self, rec: &mut RoundRecord) -> Result<(), HarnessError> {
        let e = self.evaluate(rec.round)?;
        rec.eval_loss = Some(e.loss);
        rec.eval_accuracy = e.accuracy;
        rec.eval_bytes = e.bytes;
        rec.aborted |= e.incomplete;
        Ok(())
    }

    /// Fine-tunes the current weights on every testing client and averages
    /// the query scores.
    pub fn evaluate(&mut self, round: u64) -> Result<EvalSummary, HarnessError> {
        if !self.cfg.algorithm.is_serial() {
            let report = evaluate_meta(&self.phi, &self.testing, &self.cfg.algo(), self.cfg.eval_mode())
                .map_err(HarnessError::from_meta)?;
            return Ok(EvalSummary {
                loss: report.mean_query_loss,
                accuracy: report.mean_query_accuracy,
                bytes: 0,
                incomplete: false,
            });
        }
        let mut losses = Vec::with_capacity(self.testing.len());
        let mut accuracies = Vec::new();
        let mut bytes = 0;
        for idx in 0..self.testing.len() {
            let client = self.testing[idx].clone();
            let phi = &self.phi;
            let k = self.cfg.k as u32;
            let (outcome, moved, _) = self.with_session(client, |s| s.serve_eval(phi, round, k))?;
            bytes += moved.total();
            if let Some(EvalOutcome::Completed {
                query_loss,
                query_accuracy,
            }) = outcome
            {
                losses.push(query_loss);
                accuracies.extend(query_accuracy);
            }
        }
        if losses.is_empty() {
            return Err(HarnessError::Transport(format!(
                "no testing client could be evaluated in round {round}"
            )));
        }
        let n = losses.len() as f64;
        Ok(EvalSummary {
            loss: losses.iter().sum::<f64>() / n,
            accuracy: (!accuracies.is_empty()).then(|| accuracies.iter().sum::<f64>() / accuracies.len() as f64),
            bytes,
            incomplete: losses.len() < self.testing.len(),
        })
    }

    fn client_config(&self) -> ClientConfig {
        let beta = self.cfg.beta as f32;
        let mut c = match self.cfg.algorithm {
            Algorithm::Tinyreptile => ClientConfig::streaming(beta),
            _ => ClientConfig::batched(beta, self.cfg.epochs),
        };
        c.eval_mode = self.cfg.eval_mode();
        c.timeout = self.cfg.timeout();
        c
    }

    /// Connects `client` to a fresh server session, runs `work`, closes the
    /// session and collects the client's statistics. Returns `None` as the
    /// outcome when the handshake failed.
    fn with_session<R>(
        &self,
        client: ClientHandle,
        work: impl FnOnce(&mut ServerSession<Box<dyn Transport>>) -> Result<R, SessionError>,
    ) -> Result<(Option<R>, SessionBytes, Option<ClientStats>), HarnessError>
    where
        R: Send,
    {
        let model = Arc::clone(&self.model);
        let ccfg = self.client_config();
        let timeout = self.cfg.timeout();
        thread::scope(|scope| {
            let (session, handle) = match &self.tcp {
                None => {
                    let (server_end, client_end) = channel_pair();
                    let handle = scope.spawn(move || client_loop(client_end, &client, &model, &ccfg));
                    let session = ServerSession::accept(Box::new(server_end) as Box<dyn Transport>, timeout);
                    (session, handle)
                }
                Some(server) => {
                    let addr = server.local_addr();
                    let handle = scope.spawn(move || {
                        let stream = TcpStream::connect(addr).map_err(|e| ClientError::Link(e.into()))?;
                        client_loop(stream, &client, &model, &ccfg)
                    });
                    let session = server.accept_with(|s| Box::new(s) as Box<dyn Transport>);
                    (session, handle)
                }
            };
            let (outcome, moved) = match session {
                Ok(mut s) => {
                    let out = work(&mut s).map_err(|e| HarnessError::Transport(e.to_string()))?;
                    let (sent, received) = s.close();
                    (Some(out), SessionBytes { down: sent, up: received })
                }
                Err(_) => (None, SessionBytes::default()),
            };
            let stats = match handle.join().expect("client thread panicked") {
                Ok(stats) => Some(stats),
                Err(ClientError::Meta(e)) => return Err(HarnessError::from_meta(e)),
                Err(ClientError::Link(_)) => None,
            };
            Ok((outcome, moved, stats))
        })
    }

    fn serial_round(&mut self, round: u64, rec: &mut RoundRecord) -> Result<(), HarnessError> {
        let idx = self.sampler.sample(self.training.len(), 1, &mut self.rng)[0];
        let client = self.training[idx].clone();
        let alpha = self.cfg.alpha_at(round);
        let phi = &self.phi;
        let (outcome, moved, stats) = self.with_session(client, |s| s.serve_round(phi, round, alpha))?;
        rec.bytes_down = moved.down;
        rec.bytes_up = moved.up;
        rec.local_train_seconds = stats.map_or(0.0, |s| s.local_train_seconds);
        match outcome {
            Some(RoundOutcome::Completed { weights, .. }) => self.phi = weights,
            Some(RoundOutcome::Aborted(_)) | None => rec.aborted = true,
        }
        Ok(())
    }

    fn multi_client_round(&mut self, round: u64, rec: &mut RoundRecord) -> Result<(), HarnessError> {
        let n = self.cfg.clients_per_round;
        let picked: Vec<ClientHandle> = self
            .sampler
            .sample(self.training.len(), n, &mut self.rng)
            .into_iter()
            .map(|i| self.training[i].clone())
            .collect();
        let algo = self.cfg.algo().with_alpha(self.cfg.alpha_at(round));
        let start = Instant::now();
        let result = match self.cfg.algorithm {
            Algorithm::ReptileBatched => reptile_batched_round(&self.phi, &picked, round, &algo),
            Algorithm::Fedavg => fedavg_round(&self.phi, &picked, round, &algo),
            Algorithm::Fedsgd => fedsgd_round(&self.phi, &picked, round, &algo),
            Algorithm::Joint => joint_round(&self.phi, &picked, round, &algo, seeds::derive(self.seed, JOINT_TAG)),
            Algorithm::Tinyreptile | Algorithm::Reptile => unreachable!("serial algorithms use the protocol"),
        };
        rec.local_train_seconds = start.elapsed().as_secs_f64();
        if self.cfg.algorithm != Algorithm::Joint {
            let params = self.phi.len();
            for c in &picked {
                let b = if c.drops_out(round) {
                    protocol::dropped_session_bytes(params)
                } else {
                    protocol::training_session_bytes(params)
                };
                rec.bytes_down += b.down;
                rec.bytes_up += b.up;
            }
        }
        match result {
            Ok(phi) => self.phi = phi,
            Err(MetaError::AllClientsDropped) => rec.aborted = true,
            Err(e) => return Err(HarnessError::from_meta(e)),
        }
        Ok(())
    }
}
