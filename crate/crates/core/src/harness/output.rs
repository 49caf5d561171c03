use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::runner::RoundRecord;
use super::{ExperimentOutput, HarnessError};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Column names of the metrics table. Depends only on the task type and the
/// repeat count.
pub fn metrics_header(classification: bool, repeats: usize) -> Vec<&'static str> {
    let mut h = vec!["round"];
    if repeats == 1 {
        h.push("eval_loss");
        if classification {
            h.push("eval_accuracy");
        }
        h.extend(["comm_bytes", "aborted"]);
    } else {
        h.extend(["eval_loss_mean", "eval_loss_std"]);
        if classification {
            h.extend(["eval_accuracy_mean", "eval_accuracy_std"]);
        }
        h.extend(["comm_bytes_mean", "aborted_count"]);
    }
    h
}

fn metrics_rows(out: &ExperimentOutput) -> Vec<Vec<String>> {
    let classification = out.config.is_classification();
    let runs = &out.runs;
    let n_rounds = runs[0].records.len();
    (0..n_rounds)
        .map(|i| {
            let recs: Vec<&RoundRecord> = runs.iter().map(|r| &r.records[i]).collect();
            let mut row = vec![recs[0].round.to_string()];
            if runs.len() == 1 {
                let r = recs[0];
                row.push(opt(r.eval_loss));
                if classification {
                    row.push(opt(r.eval_accuracy));
                }
                row.push(r.comm_bytes().to_string());
                row.push(u8::from(r.aborted).to_string());
            } else {
                let stat = |f: fn(&RoundRecord) -> Option<f64>| -> [String; 2] {
                    let v: Option<Vec<f64>> = recs.iter().map(|r| f(r)).collect();
                    match v {
                        Some(v) => {
                            let (m, s) = mean_std(&v);
                            [m.to_string(), s.to_string()]
                        }
                        None => [String::new(), String::new()],
                    }
                };
                row.extend(stat(|r| r.eval_loss));
                if classification {
                    row.extend(stat(|r| r.eval_accuracy));
                }
                let bytes: Vec<f64> = recs.iter().map(|r| r.comm_bytes() as f64).collect();
                row.push(mean_std(&bytes).0.to_string());
                row.push(recs.iter().filter(|r| r.aborted).count().to_string());
            }
            row
        })
        .collect()
}

/// Per-round metrics, aggregated over repeats. Contains no timings, so it
/// is identical across runs of the same in-process configuration.
pub fn write_metrics_csv<W: Write>(w: W, out: &ExperimentOutput) -> Result<(), HarnessError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(metrics_header(out.config.is_classification(), out.runs.len()))?;
    for row in metrics_rows(out) {
        csv.write_record(row)?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Long-format sweep table: `axis,value` followed by the metrics columns.
pub fn write_sweep_csv<W: Write>(
    w: W,
    axis: &str,
    results: &[(String, ExperimentOutput)],
) -> Result<(), HarnessError> {
    let mut csv = csv::Writer::from_writer(w);
    let Some((_, first)) = results.first() else {
        return Ok(());
    };
    let mut header = vec!["axis", "value"];
    header.extend(metrics_header(first.config.is_classification(), first.runs.len()));
    csv.write_record(header)?;
    for (value, out) in results {
        for row in metrics_rows(out) {
            let mut full = vec![axis.to_string(), value.clone()];
            full.extend(row);
            csv.write_record(full)?;
        }
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

const ROUNDS_HEADER: [&str; 11] = [
    "algorithm",
    "repeat",
    "round",
    "eval_loss",
    "eval_accuracy",
    "local_train_seconds",
    "bytes_down",
    "bytes_up",
    "eval_bytes",
    "comm_bytes",
    "aborted",
];

/// One line of the per-repeat round log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundsRow {
    pub algorithm: String,
    pub repeat: usize,
    pub record: RoundRecord,
}

/// Every record of every repeat, including wall-clock training time.
pub fn write_rounds_csv<W: Write>(w: W, out: &ExperimentOutput) -> Result<(), HarnessError> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(ROUNDS_HEADER)?;
    for run in &out.runs {
        for r in &run.records {
            csv.write_record([
                out.config.algorithm.name().to_string(),
                run.repeat.to_string(),
                r.round.to_string(),
                opt(r.eval_loss),
                opt(r.eval_accuracy),
                r.local_train_seconds.to_string(),
                r.bytes_down.to_string(),
                r.bytes_up.to_string(),
                r.eval_bytes.to_string(),
                r.comm_bytes().to_string(),
                u8::from(r.aborted).to_string(),
            ])?;
        }
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_rounds_csv<R: Read>(r: R) -> Result<Vec<RoundsRow>, HarnessError> {
    let mut csv = csv::Reader::from_reader(r);
    let header = csv.headers()?.clone();
    if header.iter().ne(ROUNDS_HEADER) {
        return Err(HarnessError::invalid(
            "rounds.csv",
            format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        ));
    }
    let bad = |line: usize, what: &str| HarnessError::invalid("rounds.csv", format!("line {line}: bad {what}"));
    let mut rows = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |j: usize, what: &str| rec[j].parse::<u64>().map_err(|_| bad(line, what));
        let real = |j: usize, what: &str| -> Result<Option<f64>, HarnessError> {
            if rec[j].is_empty() {
                Ok(None)
            } else {
                rec[j].parse().map(Some).map_err(|_| bad(line, what))
            }
        };
        rows.push(RoundsRow {
            algorithm: rec[0].to_string(),
            repeat: num(1, "repeat")? as usize,
            record: RoundRecord {
                round: num(2, "round")?,
                eval_loss: real(3, "eval_loss")?,
                eval_accuracy: real(4, "eval_accuracy")?,
                local_train_seconds: real(5, "local_train_seconds")?.unwrap_or(0.0),
                bytes_down: num(6, "bytes_down")?,
                bytes_up: num(7, "bytes_up")?,
                eval_bytes: num(8, "eval_bytes")?,
                aborted: num(10, "aborted")? != 0,
            },
        });
    }
    Ok(rows)
}

fn create(path: &Path) -> Result<fs::File, HarnessError> {
    fs::File::create(path).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Writes `metrics.csv`, `rounds.csv`, `config.toml` and the final weights
/// (`weights.bin` for repeat 0, `weights.r<N>.bin` for the others) into
/// `dir`. Returns the paths written.
pub fn write_outputs(dir: &Path, out: &ExperimentOutput) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut written = Vec::new();
    let metrics = dir.join("metrics.csv");
    write_metrics_csv(create(&metrics)?, out)?;
    written.push(metrics);
    let rounds = dir.join("rounds.csv");
    write_rounds_csv(create(&rounds)?, out)?;
    written.push(rounds);
    let config = dir.join("config.toml");
    create(&config)?
        .write_all(out.config.to_toml_string().as_bytes())
        .map_err(|e| HarnessError::Io {
            path: config.display().to_string(),
            source: e,
        })?;
    written.push(config);
    for run in &out.runs {
        let name = if run.repeat == 0 {
            "weights.bin".to_string()
        } else {
            format!("weights.r{}.bin", run.repeat)
        };
        let path = dir.join(name);
        create(&path)?
            .write_all(&run.final_weights.to_le_bytes())
            .map_err(|e| HarnessError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_standard_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn headers() {
        assert_eq!(metrics_header(false, 1), ["round", "eval_loss", "comm_bytes", "aborted"]);
        assert_eq!(
            metrics_header(true, 3),
            [
                "round",
                "eval_loss_mean",
                "eval_loss_std",
                "eval_accuracy_mean",
                "eval_accuracy_std",
                "comm_bytes_mean",
                "aborted_count"
            ]
        );
    }
}
