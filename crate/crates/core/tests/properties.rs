use std::sync::Arc;

use proptest::prelude::*;
use tinyreptile::harness::{memory_model, ExperimentConfig};
use tinyreptile::meta::meta_update;
use tinyreptile::nn::{
    backward, batch_backward, forward, init_weights, numerical_gradient, Activation, ModelConfig, ModelWeights,
    Sample,
};
use tinyreptile::protocol::decode;
use tinyreptile::seeds;
use tinyreptile::tasks::{realize_sine_data, sample_sine_task, SineRanges};

use rand::Rng;

const HIDDEN: [Activation; 3] = [Activation::Tanh, Activation::ReLU, Activation::Identity];

/// A random small net with `hidden` activations and either a regression or
/// a softmax head, plus one random sample for it.
fn random_case(seed: u64, hidden: Activation, classify: bool) -> (ModelWeights<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = seeds::rng(seed);
    let input = rng.gen_range(1..=4);
    let widths: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=6)).collect();
    let output = rng.gen_range(1..=4);
    let cfg = if classify {
        ModelConfig::classifier(input, &widths, output + 1, hidden)
    } else {
        ModelConfig::regression(input, &widths, output, hidden)
    }
    .unwrap();
    let cfg = Arc::new(cfg);
    // Scale the initialization up so hidden units are not all near-linear.
    let w0: ModelWeights<f64> = init_weights(&cfg, seed);
    let values = w0.values().iter().map(|v| v * 1.5 + rng.gen_range(-0.1..0.1)).collect();
    let w = ModelWeights::from_values(cfg.clone(), values).unwrap();
    let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let y: Vec<f64> = if classify {
        let mut y = vec![0.0; cfg.output_dim()];
        let hot = rng.gen_range(0..y.len());
        y[hot] = 1.0;
        y
    } else {
        (0..output).map(|_| rng.gen_range(-2.0..2.0)).collect()
    };
    (w, x, y)
}

/// Largest `|a - n| / max(|a|, |n|, 1e-6)` over all parameters.
fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>(), act in 0usize..3, classify in any::<bool>()) {
        let (w, x, y) = random_case(seed, HIDDEN[act], classify);
        let analytic = backward(&w, &x, &y).unwrap().gradient.into_values();
        let numeric = numerical_gradient(&w, &x, &y, 1e-5).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        prop_assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn softmax_head_sums_to_one(seed in any::<u64>(), scale in 0.1f64..200.0) {
        let (w, x, _) = random_case(seed, Activation::Tanh, true);
        let x: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let p = forward(&w, &x).unwrap();
        prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batch_gradient_is_the_mean_of_sample_gradients(seed in any::<u64>(), n in 1usize..8) {
        let (w, _, _) = random_case(seed, Activation::Tanh, false);
        let cfg = w.shape().clone();
        let mut rng = seeds::rng(seed ^ 1);
        let batch: Vec<Sample<f64>> = (0..n)
            .map(|_| Sample::new(
                (0..cfg.input_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..cfg.output_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ))
            .collect();
        let got = batch_backward(&w, &batch).unwrap();
        let mut mean = vec![0.0; w.len()];
        let mut loss = 0.0;
        for s in &batch {
            let b = backward(&w, &s.x, &s.y).unwrap();
            loss += b.loss / n as f64;
            for (m, g) in mean.iter_mut().zip(b.gradient.values()) {
                *m += g / n as f64;
            }
        }
        prop_assert!((got.loss - loss).abs() < 1e-12);
        for (a, b) in got.gradient.values().iter().zip(&mean) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn meta_update_endpoints_are_exact(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let cfg = Arc::new(ModelConfig::sine());
        let phi: ModelWeights = init_weights(&cfg, seed);
        let hat: ModelWeights = init_weights(&cfg, seed.wrapping_add(1));
        prop_assert_eq!(&meta_update(&phi, &hat, 0.0).unwrap(), &phi);
        prop_assert_eq!(&meta_update(&phi, &hat, 1.0).unwrap(), &hat);
        prop_assert_eq!(&meta_update(&phi, &phi, alpha).unwrap(), &phi);
    }

    #[test]
    fn meta_update_is_linear_in_the_difference(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let cfg = Arc::new(ModelConfig::sine());
        let phi: ModelWeights = init_weights(&cfg, seed);
        let hat: ModelWeights = init_weights(&cfg, seed.wrapping_add(1));
        let got = meta_update(&phi, &hat, alpha).unwrap();
        for ((g, p), h) in got.values().iter().zip(phi.values()).zip(hat.values()) {
            let want = *p as f64 + alpha * (*h as f64 - *p as f64);
            prop_assert!((*g as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn streams_are_seed_deterministic(seed in any::<u64>(), s in 1usize..16) {
        let ranges = SineRanges::default();
        let task = sample_sine_task(&ranges, seed);
        let split = realize_sine_data(&task, &ranges, s, 4, seed).unwrap();
        let a: Vec<Sample> = split.stream(seed).collect();
        let b: Vec<Sample> = split.stream(seed).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sine_tasks_stay_in_range_and_reconstruct(seed in any::<u64>(), s in 0usize..16) {
        let ranges = SineRanges::default();
        let task = sample_sine_task(&ranges, seed);
        prop_assert!(ranges.amplitude.contains(task.a));
        prop_assert!(ranges.frequency.contains(task.b));
        prop_assert!(ranges.phase.contains(task.c));
        let split = realize_sine_data(&task, &ranges, s, 4, seed).unwrap();
        prop_assert_eq!(split.support.len(), s);
        for smp in split.support.iter().chain(&split.query) {
            prop_assert!((smp.y[0] as f64 - task.eval(smp.x[0] as f64)).abs() < 1e-6);
        }
        let streamed: Vec<Sample> = split.stream(seed).collect();
        let mut a: Vec<_> = streamed.iter().map(|s| s.x[0].to_bits()).collect();
        let mut b: Vec<_> = split.support.iter().map(|s| s.x[0].to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn decode_is_total(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn memory_model_is_monotone(s in 1usize..256) {
        let model = ModelConfig::sine();
        let at = |s| memory_model(&ExperimentConfig { s_training: s, ..Default::default() }, &model);
        let (a, b) = (at(s), at(s + 1));
        prop_assert_eq!(a[0], b[0]);
        prop_assert!(a[1].total_bytes <= b[1].total_bytes);
    }
}
