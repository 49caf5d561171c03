//! Minimal dense networks: configuration, flat weight vectors, forward pass,
//! backpropagation and plain SGD.
//!
//! Weights live in one flat vector. Each layer contributes a block of
//! `output_dim * input_dim` weights stored row-major by output neuron,
//! followed by `output_dim` biases. The same layout is used on the wire
//! (see [`ModelWeights::to_le_bytes`]).
//!
//! Kernels are generic over [`Real`] so the training path can run in `f32`
//! while numerical checks (finite differences, normalization) run the exact
//! same code in `f64`.

mod backprop;

pub use backprop::{backward, batch_backward, forward, numerical_gradient, sample_loss, sgd_step, BackwardOutput};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating-point scalar used by the kernels.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Width in bytes, used by the memory model.
    const BYTES: usize;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
}

impl Real for f64 {
    const BYTES: usize = 8;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite gradient entry at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("malformed weight payload: {0}")]
    MalformedPayload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    #[serde(rename = "relu")]
    ReLU,
    Identity,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    MeanSquaredError,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.input_dim * self.output_dim + self.output_dim
    }
}

/// A validated stack of dense layers and the loss it is trained with.
///
/// Construction goes through [`ModelConfig::new`], so every value of this
/// type satisfies the layer-compatibility and loss/head invariants.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ModelConfig {
    layers: Vec<LayerSpec>,
    loss: Loss,
}

impl ModelConfig {
    pub fn new(layers: Vec<LayerSpec>, loss: Loss) -> Result<Self, NnError> {
        let Some(last) = layers.last() else {
            return Err(NnError::InvalidConfig("at least one layer required".into()));
        };
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(NnError::InvalidConfig(format!(
                    "layer {i} has a zero dimension"
                )));
            }
            if layer.activation == Activation::Softmax && i + 1 != layers.len() {
                return Err(NnError::InvalidConfig(format!(
                    "softmax is only allowed on the final layer (found on layer {i})"
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim != pair[1].input_dim {
                return Err(NnError::InvalidConfig(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim,
                    i + 1,
                    pair[1].input_dim
                )));
            }
        }
        match (loss, last.activation) {
            (Loss::MeanSquaredError, Activation::Identity)
            | (Loss::CrossEntropy, Activation::Softmax) => {}
            (Loss::MeanSquaredError, a) => {
                return Err(NnError::InvalidConfig(format!(
                    "mean squared error needs an identity head, found {a:?}"
                )))
            }
            (Loss::CrossEntropy, a) => {
                return Err(NnError::InvalidConfig(format!(
                    "cross entropy needs a softmax head, found {a:?}"
                )))
            }
        }
        Ok(Self { layers, loss })
    }

    /// Fully connected regression net `in -> hidden... -> out` with the given
    /// hidden activation and an identity head.
    pub fn regression(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self, NnError> {
        Self::new(
            stack(input_dim, hidden, output_dim, activation, Activation::Identity),
            Loss::MeanSquaredError,
        )
    }

    /// Classifier with a softmax head trained on cross entropy.
    pub fn classifier(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
    ) -> Result<Self, NnError> {
        Self::new(
            stack(input_dim, hidden, classes, activation, Activation::Softmax),
            Loss::CrossEntropy,
        )
    }

    /// The 1 → 32 → 32 → 1 tanh regression net used for sine tasks.
    pub fn sine() -> Self {
        Self::regression(1, &[32, 32], 1, Activation::Tanh).expect("static config is valid")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn loss(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    /// Sum of layer output widths: the number of activations kept per sample.
    pub fn activation_width(&self) -> usize {
        self.layers.iter().map(|l| l.output_dim).sum()
    }

    /// Widest layer output, which sizes the backprop delta buffers.
    pub fn max_width(&self) -> usize {
        self.layers.iter().map(|l| l.output_dim).max().unwrap_or(0)
    }

    /// Offset of each layer's weight block in the flat vector.
    pub(crate) fn param_offsets(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().scan(0, |off, l| {
            let start = *off;
            *off += l.param_count();
            Some(start)
        })
    }
}

fn stack(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    hidden_act: Activation,
    head: Activation,
) -> Vec<LayerSpec> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(output_dim);
    let n = dims.len() - 1;
    dims.windows(2)
        .enumerate()
        .map(|(i, d)| LayerSpec::new(d[0], d[1], if i + 1 == n { head } else { hidden_act }))
        .collect()
}

/// Total number of trainable parameters.
pub fn param_count(config: &ModelConfig) -> usize {
    config.layers.iter().map(LayerSpec::param_count).sum()
}

/// One labelled example. Regression targets are raw values; classification
/// targets are one-hot over the task's local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub x: Vec<T>,
    pub y: Vec<T>,
}

impl<T> Sample<T> {
    pub fn new(x: Vec<T>, y: Vec<T>) -> Self {
        Self { x, y }
    }
}

/// Flat parameter vector tied to the config that gives it shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T = f32> {
    values: Vec<T>,
    shape: Arc<ModelConfig>,
}

impl<T: Real> ModelWeights<T> {
    pub fn from_values(shape: Arc<ModelConfig>, values: Vec<T>) -> Result<Self, NnError> {
        let expected = shape.param_count();
        if values.len() != expected {
            return Err(NnError::DimensionMismatch {
                what: "weight vector",
                expected,
                got: values.len(),
            });
        }
        if let Some(layer) = first_non_finite_layer(&shape, &values) {
            return Err(NnError::NonFinite { layer });
        }
        Ok(Self { values, shape })
    }

    pub fn zeros(shape: Arc<ModelConfig>) -> Self {
        let values = vec![T::zero(); shape.param_count()];
        Self { values, shape }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn shape(&self) -> &Arc<ModelConfig> {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Converts to another scalar width, e.g. to run `f64` checks on `f32`
    /// weights.
    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            values: self
                .values
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            shape: Arc::clone(&self.shape),
        }
    }
}

impl ModelWeights<f32> {
    /// `u32` little-endian count followed by little-endian `f32` values.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.values.len());
        write_le_f32s(&self.values, &mut out);
        out
    }

    pub fn from_le_bytes(shape: Arc<ModelConfig>, bytes: &[u8]) -> Result<Self, NnError> {
        let (values, used) = read_le_f32s(bytes)?;
        if used != bytes.len() {
            return Err(NnError::MalformedPayload(format!(
                "{} trailing bytes after weight vector",
                bytes.len() - used
            )));
        }
        Self::from_values(shape, values)
    }
}

/// Appends the count-prefixed little-endian encoding of `values`.
pub fn write_le_f32s(values: &[f32], out: &mut Vec<u8>) {
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Reads a count-prefixed `f32` vector, returning it and the bytes consumed.
pub fn read_le_f32s(bytes: &[u8]) -> Result<(Vec<f32>, usize), NnError> {
    let Some(head) = bytes.get(..4) else {
        return Err(NnError::MalformedPayload("missing element count".into()));
    };
    let count = u32::from_le_bytes(head.try_into().unwrap()) as usize;
    let body_len = count
        .checked_mul(4)
        .ok_or_else(|| NnError::MalformedPayload("element count overflows".into()))?;
    let Some(body) = bytes.get(4..4 + body_len) else {
        return Err(NnError::MalformedPayload(format!(
            "count {count} needs {body_len} bytes, {} available",
            bytes.len().saturating_sub(4)
        )));
    };
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((values, 4 + body_len))
}

fn first_non_finite_layer<T: Real>(shape: &ModelConfig, values: &[T]) -> Option<usize> {
    let pos = values.iter().position(|v| !v.is_finite())?;
    let mut end = 0;
    for (i, l) in shape.layers().iter().enumerate() {
        end += l.param_count();
        if pos < end {
            return Some(i);
        }
    }
    Some(shape.layers().len() - 1)
}

/// Derivative of a loss with respect to every weight, in weight order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T = f32> {
    values: Vec<T>,
}

impl<T: Real> Gradient<T> {
    pub fn from_values(values: Vec<T>) -> Result<Self, NnError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFiniteGradient { index });
        }
        Ok(Self { values })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_weights<T: Real>(config: &Arc<ModelConfig>, seed: u64) -> ModelWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(config.param_count());
    for layer in config.layers() {
        let limit = (6.0 / (layer.input_dim + layer.output_dim) as f64).sqrt();
        for _ in 0..layer.input_dim * layer.output_dim {
            values.push(T::from_f64_lossy(rng.gen_range(-limit..=limit)));
        }
        values.extend(std::iter::repeat_n(T::zero(), layer.output_dim));
    }
    ModelWeights {
        values,
        shape: Arc::clone(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_model_has_1153_parameters() {
        assert_eq!(param_count(&ModelConfig::sine()), 1153);
    }

    #[test]
    fn param_count_small_configs() {
        let one = ModelConfig::regression(1, &[], 1, Activation::Tanh).unwrap();
        assert_eq!(param_count(&one), 2);
        let c = ModelConfig::classifier(4, &[8], 3, Activation::ReLU).unwrap();
        assert_eq!(param_count(&c), (4 * 8 + 8) + (8 * 3 + 3));
        assert_eq!(param_count(&c), 67);
    }

    #[test]
    fn rejects_bad_configs() {
        let mismatched = vec![
            LayerSpec::new(1, 4, Activation::Tanh),
            LayerSpec::new(3, 1, Activation::Identity),
        ];
        assert!(ModelConfig::new(mismatched, Loss::MeanSquaredError).is_err());

        let inner_softmax = vec![
            LayerSpec::new(2, 2, Activation::Softmax),
            LayerSpec::new(2, 2, Activation::Softmax),
        ];
        assert!(ModelConfig::new(inner_softmax, Loss::CrossEntropy).is_err());

        let zero = vec![LayerSpec::new(0, 1, Activation::Identity)];
        assert!(ModelConfig::new(zero, Loss::MeanSquaredError).is_err());

        let wrong_head = vec![LayerSpec::new(2, 2, Activation::Identity)];
        assert!(ModelConfig::new(wrong_head.clone(), Loss::CrossEntropy).is_err());
        let wrong_head = vec![LayerSpec::new(2, 2, Activation::Softmax)];
        assert!(ModelConfig::new(wrong_head, Loss::MeanSquaredError).is_err());
        assert!(ModelConfig::new(vec![], Loss::MeanSquaredError).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = Arc::new(ModelConfig::sine());
        let a: ModelWeights = init_weights(&cfg, 7);
        let b: ModelWeights = init_weights(&cfg, 7);
        let c: ModelWeights = init_weights(&cfg, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 1153);

        let mut off = 0;
        for layer in cfg.layers() {
            let limit = (6.0 / (layer.input_dim + layer.output_dim) as f32).sqrt();
            let n = layer.input_dim * layer.output_dim;
            assert!(a.values()[off..off + n].iter().all(|v| v.abs() <= limit));
            assert!(a.values()[off + n..off + n + layer.output_dim]
                .iter()
                .all(|v| *v == 0.0));
            off += layer.param_count();
        }
    }

    #[test]
    fn weight_bytes_layout() {
        let cfg = Arc::new(ModelConfig::regression(1, &[], 1, Activation::Identity).unwrap());
        let w = ModelWeights::from_values(Arc::clone(&cfg), vec![1.5f32, -2.0]).unwrap();
        let bytes = w.to_le_bytes();
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &1.5f32.to_le_bytes());
        assert_eq!(&bytes[8..], &(-2.0f32).to_le_bytes());
        assert_eq!(ModelWeights::from_le_bytes(cfg.clone(), &bytes).unwrap(), w);

        assert!(ModelWeights::from_le_bytes(cfg.clone(), &bytes[..7]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(ModelWeights::from_le_bytes(cfg, &long).is_err());
    }

    #[test]
    fn from_values_rejects_nan_and_wrong_length() {
        let cfg = Arc::new(ModelConfig::sine());
        assert!(matches!(
            ModelWeights::<f32>::from_values(cfg.clone(), vec![0.0; 3]),
            Err(NnError::DimensionMismatch { .. })
        ));
        let mut v = vec![0.0f32; 1153];
        v[1152] = f32::NAN;
        assert_eq!(
            ModelWeights::from_values(cfg, v),
            Err(NnError::NonFinite { layer: 2 })
        );
    }
}
