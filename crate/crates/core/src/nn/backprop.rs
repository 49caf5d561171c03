use super::{Activation, Gradient, Loss, ModelConfig, ModelWeights, NnError, Real, Sample};

/// Loss at one sample (or mean over a batch) and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardOutput<T = f32> {
    pub loss: f64,
    pub gradient: Gradient<T>,
}

/// Runs the network on one input.
pub fn forward<T: Real>(w: &ModelWeights<T>, x: &[T]) -> Result<Vec<T>, NnError> {
    let cfg = w.shape();
    check_dim("input", cfg.input_dim(), x.len())?;
    let mut current = x.to_vec();
    for ((l, layer), off) in cfg.layers().iter().enumerate().zip(cfg.param_offsets()) {
        let (weights, biases) = layer_params(w.values(), off, layer.input_dim, layer.output_dim);
        let mut z = vec![T::zero(); layer.output_dim];
        affine(weights, biases, &current, &mut z);
        let mut a = vec![T::zero(); layer.output_dim];
        activate(layer.activation, &z, &mut a);
        ensure_finite(&a, l)?;
        current = a;
    }
    Ok(current)
}

/// Loss at `(x, y)` together with the network output, without gradients.
pub fn sample_loss<T: Real>(w: &ModelWeights<T>, x: &[T], y: &[T]) -> Result<(f64, Vec<T>), NnError> {
    let cfg = w.shape();
    check_dim("input", cfg.input_dim(), x.len())?;
    check_dim("target", cfg.output_dim(), y.len())?;
    let width = cfg.activation_width();
    let mut pre = vec![T::zero(); width];
    let mut post = vec![T::zero(); width];
    forward_into(cfg, w.values(), x, &mut pre, &mut post)?;
    let out_off = width - cfg.output_dim();
    let loss = loss_value(cfg.loss(), &pre[out_off..], &post[out_off..], y);
    if !loss.is_finite() {
        return Err(NnError::NonFinite {
            layer: cfg.layers().len() - 1,
        });
    }
    post.drain(..out_off);
    Ok((loss, post))
}

/// Loss at `(x, y)` and its exact gradient with respect to every weight.
pub fn backward<T: Real>(
    w: &ModelWeights<T>,
    x: &[T],
    y: &[T],
) -> Result<BackwardOutput<T>, NnError> {
    let cfg = w.shape();
    check_dim("input", cfg.input_dim(), x.len())?;
    check_dim("target", cfg.output_dim(), y.len())?;

    let width = cfg.activation_width();
    let mut pre = vec![T::zero(); width];
    let mut post = vec![T::zero(); width];
    forward_into(cfg, w.values(), x, &mut pre, &mut post)?;

    let out_off = width - cfg.output_dim();
    let loss = loss_value(cfg.loss(), &pre[out_off..], &post[out_off..], y);
    if !loss.is_finite() {
        return Err(NnError::NonFinite {
            layer: cfg.layers().len() - 1,
        });
    }

    let max_width = cfg.max_width();
    let mut delta = vec![T::zero(); max_width];
    let mut delta_prev = vec![T::zero(); max_width];
    output_delta(cfg.loss(), &post[out_off..], y, &mut delta[..cfg.output_dim()]);

    let mut grad = vec![T::zero(); cfg.param_count()];
    let offsets: Vec<usize> = cfg.param_offsets().collect();
    let mut act_end = width;
    for (l, layer) in cfg.layers().iter().enumerate().rev() {
        let act_start = act_end - layer.output_dim;
        let input = if l == 0 {
            x
        } else {
            &post[act_start - layer.input_dim..act_start]
        };
        let dz = &delta[..layer.output_dim];
        let (gw, gb) = grad[offsets[l]..offsets[l] + layer.param_count()]
            .split_at_mut(layer.input_dim * layer.output_dim);
        for (o, &d) in dz.iter().enumerate() {
            let row = &mut gw[o * layer.input_dim..(o + 1) * layer.input_dim];
            for (g, &a) in row.iter_mut().zip(input) {
                *g = d * a;
            }
            gb[o] = d;
        }
        if l > 0 {
            let prev = &cfg.layers()[l - 1];
            let (weights, _) = layer_params(w.values(), offsets[l], layer.input_dim, layer.output_dim);
            let dp = &mut delta_prev[..layer.input_dim];
            propagate(weights, dz, dp);
            activation_chain(prev.activation, &pre[act_start - layer.input_dim..act_start], input, dp);
            std::mem::swap(&mut delta, &mut delta_prev);
        }
        act_end = act_start;
    }

    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFinite {
            layer: layer_of_param(cfg, index),
        });
    }
    Ok(BackwardOutput {
        loss,
        gradient: Gradient::from_values(grad)?,
    })
}

/// Mean loss and mean gradient over a batch.
///
/// The whole batch is propagated at once: activations and deltas are kept for
/// every sample, and the gradient sum is accumulated in `f64` before being
/// divided by the batch size.
pub fn batch_backward<T: Real>(
    w: &ModelWeights<T>,
    batch: &[Sample<T>],
) -> Result<BackwardOutput<T>, NnError> {
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if let [s] = batch {
        return backward(w, &s.x, &s.y);
    }
    let cfg = w.shape();
    for s in batch {
        check_dim("input", cfg.input_dim(), s.x.len())?;
        check_dim("target", cfg.output_dim(), s.y.len())?;
    }
    let n = batch.len();
    let width = cfg.activation_width();
    let max_width = cfg.max_width();
    let out_dim = cfg.output_dim();
    let out_off = width - out_dim;

    let mut pre = vec![T::zero(); n * width];
    let mut post = vec![T::zero(); n * width];
    for (i, s) in batch.iter().enumerate() {
        let rows = i * width..(i + 1) * width;
        forward_into(cfg, w.values(), &s.x, &mut pre[rows.clone()], &mut post[rows])?;
    }

    let mut loss_sum = 0.0f64;
    let mut delta = vec![T::zero(); n * max_width];
    let mut delta_prev = vec![T::zero(); n * max_width];
    for (i, s) in batch.iter().enumerate() {
        let base = i * width + out_off;
        loss_sum += loss_value(cfg.loss(), &pre[base..base + out_dim], &post[base..base + out_dim], &s.y);
        output_delta(
            cfg.loss(),
            &post[base..base + out_dim],
            &s.y,
            &mut delta[i * max_width..i * max_width + out_dim],
        );
    }
    if !loss_sum.is_finite() {
        return Err(NnError::NonFinite {
            layer: cfg.layers().len() - 1,
        });
    }

    let mut acc = vec![0.0f64; cfg.param_count()];
    let offsets: Vec<usize> = cfg.param_offsets().collect();
    let mut act_end = width;
    for (l, layer) in cfg.layers().iter().enumerate().rev() {
        let act_start = act_end - layer.output_dim;
        let (aw, ab) = acc[offsets[l]..offsets[l] + layer.param_count()]
            .split_at_mut(layer.input_dim * layer.output_dim);
        for (i, s) in batch.iter().enumerate() {
            let input = if l == 0 {
                &s.x[..]
            } else {
                &post[i * width + act_start - layer.input_dim..i * width + act_start]
            };
            let dz = &delta[i * max_width..i * max_width + layer.output_dim];
            for (o, &d) in dz.iter().enumerate() {
                let d64 = d.to_f64().unwrap_or(f64::NAN);
                let row = &mut aw[o * layer.input_dim..(o + 1) * layer.input_dim];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d64 * a.to_f64().unwrap_or(f64::NAN);
                }
                ab[o] += d64;
            }
        }
        if l > 0 {
            let prev = &cfg.layers()[l - 1];
            let (weights, _) = layer_params(w.values(), offsets[l], layer.input_dim, layer.output_dim);
            for i in 0..n {
                let dz = &delta[i * max_width..i * max_width + layer.output_dim];
                let dp = &mut delta_prev[i * max_width..i * max_width + layer.input_dim];
                let rows = i * width + act_start - layer.input_dim..i * width + act_start;
                propagate(weights, dz, dp);
                activation_chain(prev.activation, &pre[rows.clone()], &post[rows], dp);
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
        act_end = act_start;
    }
    drop(delta);
    drop(delta_prev);

    let inv = n as f64;
    let mut grad = Vec::with_capacity(acc.len());
    for (index, g) in acc.iter().enumerate() {
        let mean = g / inv;
        if !mean.is_finite() {
            return Err(NnError::NonFinite {
                layer: layer_of_param(cfg, index),
            });
        }
        grad.push(T::from_f64_lossy(mean));
    }
    Ok(BackwardOutput {
        loss: loss_sum / inv,
        gradient: Gradient::from_values(grad)?,
    })
}

/// `w - beta * g`, updating `w` in place.
pub fn sgd_step<T: Real>(
    mut w: ModelWeights<T>,
    g: &Gradient<T>,
    beta: T,
) -> Result<ModelWeights<T>, NnError> {
    check_dim("gradient", w.len(), g.len())?;
    if !(beta > T::zero() && beta.is_finite()) {
        return Err(NnError::InvalidLearningRate(beta.to_f64().unwrap_or(f64::NAN)));
    }
    for (wi, &gi) in w.values_mut().iter_mut().zip(g.values()) {
        *wi = *wi - beta * gi;
    }
    let cfg = w.shape();
    if let Some(index) = w.values().iter().position(|v| !v.is_finite()) {
        return Err(NnError::NonFinite {
            layer: layer_of_param(cfg, index),
        });
    }
    Ok(w)
}

/// Central finite-difference estimate of the gradient of the loss at one
/// sample, perturbing each parameter by `eps`.
pub fn numerical_gradient(
    w: &ModelWeights<f64>,
    x: &[f64],
    y: &[f64],
    eps: f64,
) -> Result<Vec<f64>, NnError> {
    let mut probe = w.clone();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + eps;
        let (up, _) = sample_loss(&probe, x, y)?;
        probe.values_mut()[i] = orig - eps;
        let (down, _) = sample_loss(&probe, x, y)?;
        probe.values_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), NnError> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

fn ensure_finite<T: Real>(values: &[T], layer: usize) -> Result<(), NnError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite { layer })
    }
}

fn layer_of_param(cfg: &ModelConfig, index: usize) -> usize {
    let mut end = 0;
    for (l, layer) in cfg.layers().iter().enumerate() {
        end += layer.param_count();
        if index < end {
            return l;
        }
    }
    cfg.layers().len() - 1
}

fn layer_params<T>(values: &[T], off: usize, input: usize, output: usize) -> (&[T], &[T]) {
    values[off..off + input * output + output].split_at(input * output)
}

/// Fills `pre`/`post` (one sample, `activation_width` long) layer by layer.
fn forward_into<T: Real>(
    cfg: &ModelConfig,
    values: &[T],
    x: &[T],
    pre: &mut [T],
    post: &mut [T],
) -> Result<(), NnError> {
    let mut start = 0;
    for ((l, layer), off) in cfg.layers().iter().enumerate().zip(cfg.param_offsets()) {
        let (weights, biases) = layer_params(values, off, layer.input_dim, layer.output_dim);
        let (done, rest) = post.split_at_mut(start);
        let input = if l == 0 {
            x
        } else {
            &done[start - layer.input_dim..]
        };
        let z = &mut pre[start..start + layer.output_dim];
        affine(weights, biases, input, z);
        let a = &mut rest[..layer.output_dim];
        activate(layer.activation, z, a);
        ensure_finite(a, l)?;
        start += layer.output_dim;
    }
    Ok(())
}

fn affine<T: Real>(weights: &[T], biases: &[T], input: &[T], z: &mut [T]) {
    let n_in = input.len();
    for (o, zo) in z.iter_mut().enumerate() {
        let row = &weights[o * n_in..(o + 1) * n_in];
        let mut s = biases[o];
        for (&w, &x) in row.iter().zip(input) {
            s = s + w * x;
        }
        *zo = s;
    }
}

fn activate<T: Real>(act: Activation, z: &[T], a: &mut [T]) {
    match act {
        Activation::Tanh => {
            for (ai, &zi) in a.iter_mut().zip(z) {
                *ai = zi.tanh();
            }
        }
        Activation::ReLU => {
            for (ai, &zi) in a.iter_mut().zip(z) {
                *ai = zi.max(T::zero());
            }
        }
        Activation::Identity => a.copy_from_slice(z),
        Activation::Softmax => {
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (ai, &zi) in a.iter_mut().zip(z) {
                *ai = (zi - max).exp();
                sum = sum + *ai;
            }
            for ai in a.iter_mut() {
                *ai = *ai / sum;
            }
        }
    }
}

/// Multiplies `delta` (dL/da) by da/dz in place. Softmax never reaches here:
/// it is only a head, whose delta comes from [`output_delta`].
fn activation_chain<T: Real>(act: Activation, z: &[T], a: &[T], delta: &mut [T]) {
    match act {
        Activation::Tanh => {
            for (d, &ai) in delta.iter_mut().zip(a) {
                *d = *d * (T::one() - ai * ai);
            }
        }
        Activation::ReLU => {
            for (d, &zi) in delta.iter_mut().zip(z) {
                if zi <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        Activation::Identity => {}
        Activation::Softmax => unreachable!("softmax is only valid as the final layer"),
    }
}

/// dL/da_prev = Wᵀ dL/dz.
fn propagate<T: Real>(weights: &[T], dz: &[T], out: &mut [T]) {
    let n_in = out.len();
    out.fill(T::zero());
    for (o, &d) in dz.iter().enumerate() {
        let row = &weights[o * n_in..(o + 1) * n_in];
        for (p, &w) in out.iter_mut().zip(row) {
            *p = *p + w * d;
        }
    }
}

fn loss_value<T: Real>(loss: Loss, z: &[T], a: &[T], y: &[T]) -> f64 {
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    match loss {
        Loss::MeanSquaredError => {
            let sum: f64 = a.iter().zip(y).map(|(&p, &t)| (f(p) - f(t)).powi(2)).sum();
            sum / a.len() as f64
        }
        Loss::CrossEntropy => {
            let max = z.iter().map(|&v| f(v)).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|&v| (f(v) - max).exp()).sum::<f64>().ln();
            z.iter()
                .zip(y)
                .map(|(&zi, &ti)| -f(ti) * (f(zi) - lse))
                .sum()
        }
    }
}

/// dL/dz at the head, for the loss/head pairs [`ModelConfig`] admits.
fn output_delta<T: Real>(loss: Loss, a: &[T], y: &[T], delta: &mut [T]) {
    match loss {
        Loss::MeanSquaredError => {
            let scale = T::from_f64_lossy(2.0 / a.len() as f64);
            for ((d, &p), &t) in delta.iter_mut().zip(a).zip(y) {
                *d = scale * (p - t);
            }
        }
        Loss::CrossEntropy => {
            let mass: T = y.iter().copied().sum();
            for ((d, &p), &t) in delta.iter_mut().zip(a).zip(y) {
                *d = p * mass - t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::{init_weights, LayerSpec};

    fn net(values: Vec<f64>) -> ModelWeights<f64> {
        let cfg = ModelConfig::regression(2, &[2], 1, Activation::Tanh).unwrap();
        ModelWeights::from_values(Arc::new(cfg), values).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = Arc::new(ModelConfig::sine());
        let w = ModelWeights::<f32>::zeros(cfg);
        assert_eq!(forward(&w, &[1.7]).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let cfg = Arc::new(ModelConfig::classifier(3, &[5], 4, Activation::ReLU).unwrap());
        let w = ModelWeights::<f64>::zeros(cfg);
        let out = forward(&w, &[0.3, -1.0, 2.0]).unwrap();
        for p in out {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_hand_computed_chain() {
        // layer 0: W = [[0.5, -0.25], [0.1, 0.3]], b = [0.05, -0.1]
        // layer 1: W = [[1.2, -0.7]], b = [0.2]
        let w = net(vec![0.5, -0.25, 0.1, 0.3, 0.05, -0.1, 1.2, -0.7, 0.2]);
        let x = [0.8, -1.5];
        let h0 = (0.5f64 * 0.8 + -0.25 * -1.5 + 0.05).tanh();
        let h1 = (0.1f64 * 0.8 + 0.3 * -1.5 - 0.1).tanh();
        let expected = 1.2 * h0 - 0.7 * h1 + 0.2;
        let out = forward(&w, &x).unwrap();
        assert!((out[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let w = net(vec![0.0; 9]);
        assert!(matches!(
            forward(&w, &[1.0]),
            Err(NnError::DimensionMismatch { what: "input", .. })
        ));
        assert!(matches!(
            backward(&w, &[1.0, 2.0], &[1.0, 2.0]),
            Err(NnError::DimensionMismatch { what: "target", .. })
        ));
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let cfg = Arc::new(ModelConfig::sine());
        let w: ModelWeights<f64> = init_weights(&cfg, 3);
        let y = forward(&w, &[0.4]).unwrap();
        let out = backward(&w, &[0.4], &y).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.gradient.values().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn cross_entropy_of_uniform_head_is_ln_classes() {
        let cfg = Arc::new(ModelConfig::classifier(3, &[4], 4, Activation::Tanh).unwrap());
        let w = ModelWeights::<f64>::zeros(cfg);
        let out = backward(&w, &[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let cfg = Arc::new(ModelConfig::regression(1, &[2], 1, Activation::Identity).unwrap());
        let mut w = ModelWeights::<f32>::zeros(cfg);
        w.values_mut()[0] = f32::MAX;
        w.values_mut()[1] = f32::MAX;
        w.values_mut()[4] = f32::MAX;
        w.values_mut()[5] = f32::MAX;
        assert_eq!(forward(&w, &[10.0]), Err(NnError::NonFinite { layer: 0 }));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let cfg = Arc::new(ModelConfig::regression(1, &[], 1, Activation::Identity).unwrap());
        let w = ModelWeights::from_values(cfg.clone(), vec![1.0f32, 1.0]).unwrap();
        let g = Gradient::from_values(vec![0.5f32, -0.5]).unwrap();
        assert_eq!(sgd_step(w.clone(), &g, 1.0).unwrap().values(), &[0.5, 1.5]);
        assert_eq!(sgd_step(w.clone(), &Gradient::zeros(2), 0.3).unwrap(), w);

        let half = sgd_step(sgd_step(w.clone(), &g, 0.5).unwrap(), &g, 0.5).unwrap();
        assert_eq!(half, sgd_step(w.clone(), &g, 1.0).unwrap());

        assert!(sgd_step(w.clone(), &Gradient::zeros(3), 0.1).is_err());
        assert!(matches!(
            sgd_step(w, &g, 0.0),
            Err(NnError::InvalidLearningRate(_))
        ));
    }

    #[test]
    fn batch_of_one_equals_backward() {
        let cfg = Arc::new(ModelConfig::sine());
        let w: ModelWeights = init_weights(&cfg, 11);
        let s = Sample::new(vec![0.7f32], vec![-1.3]);
        let single = backward(&w, &s.x, &s.y).unwrap();
        let batch = batch_backward(&w, std::slice::from_ref(&s)).unwrap();
        assert_eq!(single, batch);

        let dup = vec![s.clone(); 5];
        let batch = batch_backward(&w, &dup).unwrap();
        assert_eq!(single.gradient, batch.gradient);
        assert!((single.loss - batch.loss).abs() < 1e-15);
    }

    #[test]
    fn batch_mean_matches_per_sample_average() {
        let cfg = Arc::new(
            ModelConfig::new(
                vec![
                    LayerSpec::new(3, 6, Activation::ReLU),
                    LayerSpec::new(6, 4, Activation::Tanh),
                    LayerSpec::new(4, 3, Activation::Softmax),
                ],
                Loss::CrossEntropy,
            )
            .unwrap(),
        );
        let w: ModelWeights<f64> = init_weights(&cfg, 5);
        let batch: Vec<Sample<f64>> = (0..4)
            .map(|i| {
                let t = i as f64;
                let mut y = vec![0.0; 3];
                y[i % 3] = 1.0;
                Sample::new(vec![t.sin(), 0.5 - t, t * 0.3], y)
            })
            .collect();
        let mean = batch_backward(&w, &batch).unwrap();
        let mut avg = vec![0.0; cfg.param_count()];
        let mut loss = 0.0;
        for s in &batch {
            let out = backward(&w, &s.x, &s.y).unwrap();
            loss += out.loss / 4.0;
            for (a, g) in avg.iter_mut().zip(out.gradient.values()) {
                *a += g / 4.0;
            }
        }
        assert!((mean.loss - loss).abs() < 1e-12);
        for (a, b) in mean.gradient.values().iter().zip(&avg) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let cfg = Arc::new(ModelConfig::sine());
        let w: ModelWeights = init_weights(&cfg, 1);
        assert_eq!(batch_backward(&w, &[]), Err(NnError::EmptyBatch));
    }
}
