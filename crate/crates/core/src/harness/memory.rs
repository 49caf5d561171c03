use std::mem::size_of;

use super::config::{Algorithm, ExperimentConfig, TransportKind};
use super::runner::Experiment;
use super::HarnessError;
use crate::instrument::{self, AllocStats};
use crate::meta::{batched_local_train, streaming_local_train};
use crate::nn::{ModelConfig, Sample};

/// Peak client-side buffer sizes during one round of local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub algorithm: Algorithm,
    pub weights_bytes: u64,
    pub gradient_bytes: u64,
    pub sample_buffer_bytes: u64,
    pub activation_bytes: u64,
    pub total_bytes: u64,
}

fn estimate(algorithm: Algorithm, model: &ModelConfig, resident: usize) -> MemoryEstimate {
    let p = model.param_count() as u64;
    let n = resident.max(1) as u64;
    let weights_bytes = 4 * p;
    // A batch of more than one sample accumulates its gradient in f64
    // before casting the mean.
    let gradient_bytes = 4 * p + if n > 1 { 8 * p } else { 0 };
    let per_sample = size_of::<Sample>() as u64 + 4 * (model.input_dim() + model.output_dim()) as u64;
    let sample_buffer_bytes = n * per_sample;
    // Pre- and post-activations of every layer plus two delta buffers per
    // sample, and the table of layer offsets.
    let per_sample_act = 4 * (2 * model.activation_width() + 2 * model.max_width()) as u64;
    let activation_bytes = n * per_sample_act + (model.layers().len() * size_of::<usize>()) as u64;
    MemoryEstimate {
        algorithm,
        weights_bytes,
        gradient_bytes,
        sample_buffer_bytes,
        activation_bytes,
        total_bytes: weights_bytes + gradient_bytes + sample_buffer_bytes + activation_bytes,
    }
}

/// Analytic peak memory of the client during local training, for
/// TinyReptile (one resident sample) and Reptile (the whole support).
pub fn memory_model(cfg: &ExperimentConfig, model: &ModelConfig) -> Vec<MemoryEstimate> {
    let support = if cfg.is_classification() {
        cfg.s_training * cfg.few_shot.ways
    } else {
        cfg.s_training
    };
    vec![
        estimate(Algorithm::Tinyreptile, model, 1),
        estimate(Algorithm::Reptile, model, support),
    ]
}

/// Measures the heap high-water mark of one local training call of
/// `algorithm` (TinyReptile streams; everything else trains batched).
/// The statistics are zero unless [`instrument::CountingAlloc`] is the
/// global allocator.
pub fn measure_local_training(cfg: &ExperimentConfig, algorithm: Algorithm) -> Result<AllocStats, HarnessError> {
    let cfg = ExperimentConfig {
        algorithm,
        transport: TransportKind::InProcess,
        ..cfg.clone()
    };
    let exp = Experiment::new(&cfg, 0)?;
    let client = &exp.training_clients()[0];
    let phi = exp.phi();
    let beta = cfg.beta as f32;
    let (result, stats) = instrument::measure(|| match algorithm {
        Algorithm::Tinyreptile => streaming_local_train(phi.clone(), client.support_stream(1), beta),
        _ => batched_local_train(phi.clone(), client.support_stream(1), cfg.epochs, beta),
    });
    result.map_err(|e| HarnessError::Numeric(e.to_string()))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_sum_and_ratio() {
        let cfg = ExperimentConfig::default();
        let model = ModelConfig::sine();
        let est = memory_model(&cfg, &model);
        for e in &est {
            assert_eq!(
                e.total_bytes,
                e.weights_bytes + e.gradient_bytes + e.sample_buffer_bytes + e.activation_bytes
            );
            assert_eq!(e.weights_bytes, 4 * 1153);
        }
        assert!(est[1].total_bytes >= 2 * est[0].total_bytes);
    }

    #[test]
    fn monotone_in_support_size() {
        let model = ModelConfig::sine();
        let at = |s| {
            memory_model(
                &ExperimentConfig {
                    s_training: s,
                    ..Default::default()
                },
                &model,
            )
        };
        let mut last = at(1);
        assert_eq!(last[0], MemoryEstimate { algorithm: Algorithm::Tinyreptile, ..last[1] });
        for s in 2..=64 {
            let now = at(s);
            assert_eq!(now[0], last[0]);
            assert!(now[1].total_bytes >= last[1].total_bytes);
            last = now;
        }
    }
}
