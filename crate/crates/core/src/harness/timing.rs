use super::runner::RoundRecord;
use super::HarnessError;

/// Per-round means over a set of records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSummary {
    pub rounds: usize,
    pub mean_local_train_seconds: f64,
    pub mean_bytes_down: f64,
    pub mean_bytes_up: f64,
    pub mean_eval_bytes: f64,
    pub mean_comm_bytes: f64,
    pub aborted: usize,
}

/// Averages training time and traffic, by direction, over `records`.
pub fn time_accounting(records: &[RoundRecord]) -> Result<TimeSummary, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::invalid("records", "no round records to summarize"));
    }
    let n = records.len() as f64;
    let mean = |f: fn(&RoundRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(TimeSummary {
        rounds: records.len(),
        mean_local_train_seconds: mean(|r| r.local_train_seconds),
        mean_bytes_down: mean(|r| r.bytes_down as f64),
        mean_bytes_up: mean(|r| r.bytes_up as f64),
        mean_eval_bytes: mean(|r| r.eval_bytes as f64),
        mean_comm_bytes: mean(|r| r.comm_bytes() as f64),
        aborted: records.iter().filter(|r| r.aborted).count(),
    })
}
