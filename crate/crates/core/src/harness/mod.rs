//! Experiment orchestration: configuration, repeated runs, sweeps, CSV
//! output, the analytic memory model and round-time accounting.

mod config;
mod memory;
mod output;
mod runner;
mod timing;

use std::io;
use std::thread;

use thiserror::Error;

pub use config::{
    Algorithm, ExperimentConfig, FewShotConfig, SamplerKind, TaskKind, TransportKind, SWEEP_AXES,
};
pub use memory::{measure_local_training, memory_model, MemoryEstimate};
pub use output::{
    metrics_header, read_rounds_csv, write_metrics_csv, write_outputs, write_rounds_csv, write_sweep_csv,
    RoundsRow,
};
pub use runner::{repeat_seed, EvalSummary, Experiment, RoundRecord, RunResult};
pub use timing::{time_accounting, TimeSummary};

use crate::meta::MetaError;
use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config `{field}`: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("unknown sweep axis {0:?}; expected one of beta, s_training, s_testing, k")]
    UnknownAxis(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Failure families, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Transport,
    Numeric,
    Io,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Io => 1,
            ErrorCategory::Config => 2,
            ErrorCategory::Transport => 3,
            ErrorCategory::Numeric => 4,
        }
    }
}

impl HarnessError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            HarnessError::InvalidConfig { .. } | HarnessError::UnknownAxis(_) => ErrorCategory::Config,
            HarnessError::Transport(_) => ErrorCategory::Transport,
            HarnessError::Numeric(_) => ErrorCategory::Numeric,
            HarnessError::Io { .. } | HarnessError::Csv(_) => ErrorCategory::Io,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }

    pub(crate) fn from_meta(e: MetaError) -> Self {
        match e {
            MetaError::Nn(NnError::InvalidConfig(m)) => HarnessError::invalid("model", m),
            MetaError::Nn(e) => HarnessError::Numeric(e.to_string()),
            other => HarnessError::invalid("algorithm", other.to_string()),
        }
    }
}

/// Every repeat of one configuration.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub config: ExperimentConfig,
    /// Ordered by repeat index.
    pub runs: Vec<RunResult>,
}

/// Runs all repeats of `cfg`. In-process repeats run in parallel; each has
/// its own seed and state, so the result does not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let one = |r: usize| Experiment::new(cfg, r)?.run(r);
    let runs = if matches!(cfg.transport, TransportKind::Tcp { .. }) || cfg.repeats == 1 {
        (0..cfg.repeats).map(one).collect::<Result<Vec<_>, _>>()?
    } else {
        thread::scope(|scope| {
            let handles: Vec<_> = (0..cfg.repeats).map(|r| scope.spawn(move || one(r))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("repeat panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
    };
    Ok(ExperimentOutput {
        config: cfg.clone(),
        runs,
    })
}

/// Runs `base` once per value of `axis`, all with the same seeds.
pub fn sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[String],
) -> Result<Vec<(String, ExperimentOutput)>, HarnessError> {
    if !SWEEP_AXES.contains(&axis) {
        return Err(HarnessError::UnknownAxis(axis.to_string()));
    }
    values
        .iter()
        .map(|v| {
            let cfg = base.with_override(axis, v)?;
            Ok((v.clone(), run_experiment(&cfg)?))
        })
        .collect()
}
