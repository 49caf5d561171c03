use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tinyreptile::harness::{
    measure_local_training, memory_model, read_rounds_csv, run_experiment, sweep, time_accounting, write_metrics_csv,
    write_outputs, write_sweep_csv, ExperimentConfig, HarnessError, RoundRecord,
};
use tinyreptile::instrument::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "tinyreptile", version, about = "Serial streaming federated meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment, all repeats.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write metrics.csv, rounds.csv, config.toml and weights into this
        /// directory instead of printing metrics to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the experiment once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of beta, s_training, s_testing, k.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<String>,
        /// Output CSV file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the analytic client memory estimate per algorithm.
    Memmodel {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also measure the allocation high-water mark of one local training.
        #[arg(long)]
        measure: bool,
    },
    /// Summarize per-round training time and traffic from rounds.csv files.
    Report {
        #[arg(required = true)]
        rounds: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply to keys it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set beta=0.02` or `--set transport.kind=tcp`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, HarnessError> {
        ExperimentConfig::load_with_overrides(self.config.as_deref(), &self.overrides)
    }
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn io_err(path: &str) -> impl Fn(io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io {
        path: path.to_string(),
        source: e,
    }
}

fn create(path: &Path) -> Result<File, HarnessError> {
    File::create(path).map_err(io_err(&path.display().to_string()))
}

fn memmodel(cfg: &ExperimentConfig, measure: bool) -> Result<(), HarnessError> {
    let mut out = io::stdout().lock();
    let mut header = String::from("algorithm,weights_bytes,gradient_bytes,sample_buffer_bytes,activation_bytes,total_bytes");
    if measure {
        header.push_str(",measured_peak_bytes");
    }
    writeln!(out, "{header}").map_err(io_err("stdout"))?;
    for e in memory_model(cfg, &cfg.model()) {
        let mut line = format!(
            "{},{},{},{},{},{}",
            e.algorithm, e.weights_bytes, e.gradient_bytes, e.sample_buffer_bytes, e.activation_bytes, e.total_bytes
        );
        if measure {
            let stats = measure_local_training(cfg, e.algorithm)?;
            line.push_str(&format!(",{}", stats.peak_bytes));
        }
        writeln!(out, "{line}").map_err(io_err("stdout"))?;
    }
    Ok(())
}

fn report(paths: &[PathBuf]) -> Result<(), HarnessError> {
    let mut by_algorithm: BTreeMap<String, Vec<RoundRecord>> = BTreeMap::new();
    for path in paths {
        let file = File::open(path).map_err(io_err(&path.display().to_string()))?;
        for row in read_rounds_csv(file)? {
            // Round 0 only evaluates the initialization.
            if row.record.round > 0 {
                by_algorithm.entry(row.algorithm).or_default().push(row.record);
            }
        }
    }
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "algorithm,rounds,mean_local_train_seconds,mean_bytes_down,mean_bytes_up,mean_eval_bytes,mean_comm_bytes,aborted"
    )
    .map_err(io_err("stdout"))?;
    for (algorithm, records) in &by_algorithm {
        let s = time_accounting(records)?;
        writeln!(
            out,
            "{algorithm},{},{},{},{},{},{},{}",
            s.rounds,
            s.mean_local_train_seconds,
            s.mean_bytes_down,
            s.mean_bytes_up,
            s.mean_eval_bytes,
            s.mean_comm_bytes,
            s.aborted
        )
        .map_err(io_err("stdout"))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = config.load()?;
            let result = run_experiment(&cfg)?;
            match out {
                Some(dir) => {
                    for path in write_outputs(&dir, &result)? {
                        eprintln!("wrote {}", path.display());
                    }
                }
                None => write_metrics_csv(io::stdout().lock(), &result)?,
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let cfg = config.load()?;
            let results = sweep(&cfg, &axis, &values)?;
            match out {
                Some(path) => write_sweep_csv(create(&path)?, &axis, &results)?,
                None => write_sweep_csv(io::stdout().lock(), &axis, &results)?,
            }
        }
        Command::Memmodel { config, measure } => memmodel(&config.load()?, measure)?,
        Command::Report { rounds } => report(&rounds)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
