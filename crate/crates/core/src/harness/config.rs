use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::meta::{AlgoConfig, FinetuneMode};
use crate::nn::{Activation, ModelConfig};
use crate::tasks::SineRanges;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[serde(alias = "tiny_reptile")]
    Tinyreptile,
    /// Serial Reptile, one client per round.
    Reptile,
    ReptileBatched,
    Fedavg,
    Fedsgd,
    /// Plain SGD on pooled client data.
    Joint,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::Tinyreptile,
        Algorithm::Reptile,
        Algorithm::ReptileBatched,
        Algorithm::Fedavg,
        Algorithm::Fedsgd,
        Algorithm::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Tinyreptile => "tinyreptile",
            Algorithm::Reptile => "reptile",
            Algorithm::ReptileBatched => "reptile_batched",
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedsgd => "fedsgd",
            Algorithm::Joint => "joint",
        }
    }

    /// Serial algorithms run one client per round over the wire protocol.
    pub fn is_serial(self) -> bool {
        matches!(self, Algorithm::Tinyreptile | Algorithm::Reptile)
    }

    /// Whether the server step is an interpolation with rate alpha.
    pub fn uses_alpha(self) -> bool {
        matches!(
            self,
            Algorithm::Tinyreptile | Algorithm::Reptile | Algorithm::ReptileBatched
        )
    }

    /// Fine-tuning mode matching how the algorithm trains locally.
    pub fn default_eval_mode(self) -> FinetuneMode {
        match self {
            Algorithm::Tinyreptile => FinetuneMode::Streaming,
            _ => FinetuneMode::Batched,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "tiny_reptile" && *a == Algorithm::Tinyreptile))
            .ok_or_else(|| HarnessError::invalid("algorithm", format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sine,
    SyntheticFewShot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransportKind {
    InProcess,
    Tcp { address: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    RoundRobin,
}

/// Synthetic few-shot classification settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    /// Prototype universe size.
    pub classes: usize,
    pub dim: usize,
    /// Classes per client task.
    pub ways: usize,
    /// Standard deviation of the Gaussian input noise.
    pub noise: f64,
    pub hidden: Vec<usize>,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            classes: 100,
            dim: 64,
            ways: 5,
            noise: 0.1,
            hidden: vec![64],
        }
    }
}

/// Everything that determines an experiment. Every field has a default, so a
/// config file only names what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub task: TaskKind,
    pub rounds: u64,
    /// Support size of a training visit (samples, or shots per class).
    pub s_training: usize,
    /// Support size of a testing client.
    pub s_testing: usize,
    /// Query size of a testing client.
    pub q: usize,
    pub alpha: f64,
    /// Decay alpha linearly to zero over the round budget.
    pub alpha_decay: bool,
    pub beta: f64,
    pub k: usize,
    /// Local epochs of batched local training.
    pub epochs: usize,
    pub clients_per_round: usize,
    pub master_seed: u64,
    pub eval_every: u64,
    pub transport: TransportKind,
    pub repeats: usize,
    pub training_clients: usize,
    pub testing_clients: usize,
    /// Overrides the algorithm's own fine-tuning mode at evaluation.
    pub eval_mode: Option<FinetuneMode>,
    /// Probability that a training client vanishes mid-round.
    pub dropout: f64,
    pub sampler: SamplerKind,
    /// Mini-batch size of the joint baseline; absent means full batch.
    pub joint_batch: Option<usize>,
    pub timeout_secs: f64,
    pub sine: SineRanges,
    pub few_shot: FewShotConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let algo = AlgoConfig::default();
        Self {
            algorithm: Algorithm::Tinyreptile,
            task: TaskKind::Sine,
            rounds: 2000,
            s_training: 32,
            s_testing: 8,
            q: 32,
            alpha: algo.alpha,
            alpha_decay: true,
            beta: algo.beta,
            k: algo.k,
            epochs: algo.epochs,
            clients_per_round: algo.clients_per_round,
            master_seed: 0,
            eval_every: 50,
            transport: TransportKind::InProcess,
            repeats: 1,
            training_clients: 1000,
            testing_clients: 20,
            eval_mode: None,
            dropout: 0.0,
            sampler: SamplerKind::Uniform,
            joint_batch: algo.joint_batch,
            timeout_secs: 30.0,
            sine: SineRanges::default(),
            few_shot: FewShotConfig::default(),
        }
    }
}

/// Fields a sweep may vary.
pub const SWEEP_AXES: [&str; 4] = ["beta", "s_training", "s_testing", "k"];

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::invalid("config", e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    /// Builds a config from a file's table with `key=value` overrides applied
    /// on top. Keys may be dotted (`few_shot.ways=3`); values are TOML, with
    /// bare words read as strings.
    pub fn from_parts(mut table: toml::Table, overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        for (key, value) in overrides {
            set_dotted(&mut table, key, parse_value(value))?;
        }
        Self::from_table(table)
    }

    /// Defaults, overlaid with the file at `path` if given, then with
    /// `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, HarnessError> {
        let table = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
                text.parse()
                    .map_err(|e: toml::de::Error| HarnessError::invalid("config", e.message().to_string()))?
            }
            None => toml::Table::new(),
        };
        Self::from_parts(table, overrides)
    }

    fn from_table(table: toml::Table) -> Result<Self, HarnessError> {
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::invalid("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Returns a copy with one field replaced.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, HarnessError> {
        let table = toml::Table::try_from(self).expect("config serializes");
        Self::from_parts(table, &[(key.to_string(), value.to_string())])
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |field: &'static str, msg: String| Err(HarnessError::invalid(field, msg));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", format!("must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta", format!("must lie in (0, 1], got {}", self.beta));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.clients_per_round == 0 {
            return bad("clients_per_round", "must be at least 1".into());
        }
        if self.clients_per_round > self.training_clients {
            return bad(
                "clients_per_round",
                format!("{} exceeds training_clients {}", self.clients_per_round, self.training_clients),
            );
        }
        if self.training_clients == 0 {
            return bad("training_clients", "must be at least 1".into());
        }
        if self.testing_clients == 0 {
            return bad("testing_clients", "must be at least 1".into());
        }
        if self.s_training == 0 {
            return bad("s_training", "must be at least 1".into());
        }
        if self.q == 0 {
            return bad("q", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        if self.repeats == 0 {
            return bad("repeats", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad("timeout_secs", format!("must be positive, got {}", self.timeout_secs));
        }
        if self.joint_batch == Some(0) {
            return bad("joint_batch", "must be at least 1".into());
        }
        if let TransportKind::Tcp { address } = &self.transport {
            if !self.algorithm.is_serial() {
                return bad(
                    "transport",
                    format!("tcp transport needs a serial algorithm, not {}", self.algorithm),
                );
            }
            if address.is_empty() {
                return bad("transport.address", "must not be empty".into());
            }
        }
        if let Err(e) = self.sine.validate() {
            return bad("sine", e.to_string());
        }
        let fs = &self.few_shot;
        if fs.classes == 0 || fs.dim == 0 {
            return bad("few_shot", "classes and dim must be at least 1".into());
        }
        if fs.ways == 0 || fs.ways > fs.classes {
            return bad("few_shot.ways", format!("must lie in 1..={}, got {}", fs.classes, fs.ways));
        }
        if !(fs.noise >= 0.0 && fs.noise.is_finite()) {
            return bad("few_shot.noise", format!("must be non-negative, got {}", fs.noise));
        }
        if fs.hidden.contains(&0) {
            return bad("few_shot.hidden", "layer widths must be at least 1".into());
        }
        Ok(())
    }

    pub fn algo(&self) -> AlgoConfig {
        AlgoConfig {
            alpha: self.alpha,
            beta: self.beta,
            k: self.k,
            epochs: self.epochs,
            clients_per_round: self.clients_per_round,
            joint_batch: self.joint_batch,
        }
    }

    pub fn model(&self) -> ModelConfig {
        match self.task {
            TaskKind::Sine => ModelConfig::sine(),
            TaskKind::SyntheticFewShot => ModelConfig::classifier(
                self.few_shot.dim,
                &self.few_shot.hidden,
                self.few_shot.ways,
                Activation::ReLU,
            )
            .expect("validated few-shot config"),
        }
    }

    pub fn eval_mode(&self) -> FinetuneMode {
        self.eval_mode.unwrap_or(self.algorithm.default_eval_mode())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn is_classification(&self) -> bool {
        self.task == TaskKind::SyntheticFewShot
    }

    /// Server learning rate for the 1-based training round `round`.
    pub fn alpha_at(&self, round: u64) -> f64 {
        if self.alpha_decay {
            crate::meta::decayed_alpha(self.alpha, round - 1, self.rounds)
        } else {
            self.alpha
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), HarnessError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(HarnessError::invalid("override", format!("empty key in {key:?}")));
    };
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::invalid("override", format!("{p:?} in {key:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_and_overrides() {
        let table: toml::Table = "algorithm = \"reptile\"\nrounds = 10\n[few_shot]\nways = 3\n"
            .parse()
            .unwrap();
        let cfg = ExperimentConfig::from_parts(
            table,
            &[
                ("beta".into(), "0.02".into()),
                ("task".into(), "synthetic_few_shot".into()),
                ("few_shot.noise".into(), "0.2".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Reptile);
        assert_eq!(cfg.rounds, 10);
        assert_eq!(cfg.beta, 0.02);
        assert_eq!(cfg.few_shot.ways, 3);
        assert_eq!(cfg.few_shot.noise, 0.2);
        assert_eq!(cfg.task, TaskKind::SyntheticFewShot);
        assert_eq!(cfg.model().output_dim(), 3);
    }

    #[test]
    fn field_level_errors() {
        let field = |text: &str| match ExperimentConfig::from_toml_str(text) {
            Err(HarnessError::InvalidConfig { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(field("beta = 0.0"), "beta");
        assert_eq!(field("repeats = 0"), "repeats");
        assert_eq!(field("clients_per_round = 5\ntraining_clients = 2"), "clients_per_round");
        assert_eq!(field("[few_shot]\nways = 200"), "few_shot.ways");
        assert_eq!(
            field("algorithm = \"fedavg\"\ntransport = { kind = \"tcp\", address = \"127.0.0.1:0\" }"),
            "transport"
        );
        assert_eq!(field("no_such_key = 1"), "config");
        assert_eq!(field("rounds = \"many\""), "config");
    }

    #[test]
    fn tcp_transport_parses() {
        let cfg = ExperimentConfig::from_toml_str("transport = { kind = \"tcp\", address = \"127.0.0.1:0\" }").unwrap();
        assert_eq!(
            cfg.transport,
            TransportKind::Tcp {
                address: "127.0.0.1:0".into()
            }
        );
    }

    #[test]
    fn sweep_override_keeps_other_fields() {
        let base = ExperimentConfig {
            rounds: 7,
            ..Default::default()
        };
        let swept = base.with_override("s_testing", "0").unwrap();
        assert_eq!(swept.s_testing, 0);
        assert_eq!(swept.rounds, 7);
    }

    #[test]
    fn decayed_alpha_schedule() {
        let cfg = ExperimentConfig {
            rounds: 4,
            ..Default::default()
        };
        let alphas: Vec<f64> = (1..=4).map(|r| cfg.alpha_at(r)).collect();
        assert_eq!(alphas, vec![1.0, 0.75, 0.5, 0.25]);
    }
}
