//! MLP forward/backward, training loop and evaluation.
//!
//! The backward pass is hand-derived and exact; a finite-difference test
//! in this file keeps it honest. Everything is deterministic given the
//! seeds in play: initialization draws from a counter-free ChaCha stream
//! and the training loop uses a fixed shuffle schedule.

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{ParamSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// MLP architecture descriptor. Layer tensors are named `layer{i}.weight`
/// (shape `[out, in]`, row-major) and `layer{i}.bias` (shape `[out]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
    /// Name globs for layers a defense must never perturb.
    #[serde(default)]
    pub excluded_layer_patterns: Vec<String>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidConfig("input_dim must be >= 1".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
        }
        if self.hidden_dims.iter().any(|d| *d < 1) {
            return Err(Error::InvalidConfig("hidden dims must be >= 1".into()));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per linear layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for h in &self.hidden_dims {
            dims.push((fan_in, *h));
            fan_in = *h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn num_linear_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn weight_name(i: usize) -> String {
        format!("layer{i}.weight")
    }

    pub fn bias_name(i: usize) -> String {
        format!("layer{i}.bias")
    }

    /// Checks that `params` holds exactly the tensors this spec implies.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let dims = self.layer_dims();
        let expected = dims.len() * 2;
        if params.num_layers() != expected {
            return Err(Error::LayoutMismatch(format!(
                "expected {expected} tensors for {} linear layers, found {}",
                dims.len(),
                params.num_layers()
            )));
        }
        for (i, (fan_in, fan_out)) in dims.iter().enumerate() {
            let w = params
                .layer(&Self::weight_name(i))
                .ok_or_else(|| Error::LayoutMismatch(format!("missing {}", Self::weight_name(i))))?;
            if w.shape() != [*fan_out, *fan_in] {
                return Err(Error::LayoutMismatch(format!(
                    "{} has shape {:?}, expected [{fan_out}, {fan_in}]",
                    Self::weight_name(i),
                    w.shape()
                )));
            }
            let b = params
                .layer(&Self::bias_name(i))
                .ok_or_else(|| Error::LayoutMismatch(format!("missing {}", Self::bias_name(i))))?;
            if b.shape() != [*fan_out] {
                return Err(Error::LayoutMismatch(format!(
                    "{} has shape {:?}, expected [{fan_out}]",
                    Self::bias_name(i),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic initialization: weights ~ N(0, 1/fan_in), biases zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().iter().enumerate() {
        let scale = 1.0 / (*fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        params.insert(ModelSpec::weight_name(i), Tensor::new(vec![*fan_out, *fan_in], data)?)?;
        params.insert(ModelSpec::bias_name(i), Tensor::zeros(vec![*fan_out]))?;
    }
    Ok(params)
}

/// Per-layer activations kept around for the backward pass.
/// `acts[0]` is the input batch; `acts[i+1]` the post-activation output of
/// layer i (logits for the final layer, no activation applied).
struct ForwardTrace {
    acts: Vec<Vec<f64>>,
}

fn activate(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
    }
}

/// Derivative expressed through the post-activation value.
fn activate_deriv(act: Activation, post: f64) -> f64 {
    match act {
        Activation::Relu => {
            if post > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - post * post,
    }
}

fn forward_trace(spec: &ModelSpec, params: &ParamSet, inputs: &[f64]) -> Result<ForwardTrace> {
    spec.check_params(params)?;
    if inputs.len() % spec.input_dim != 0 {
        return Err(Error::LayoutMismatch(format!(
            "batch of {} values is not a multiple of input_dim {}",
            inputs.len(),
            spec.input_dim
        )));
    }
    let n = inputs.len() / spec.input_dim;
    let dims = spec.layer_dims();
    let num_layers = dims.len();
    let mut acts = Vec::with_capacity(num_layers + 1);
    acts.push(inputs.to_vec());

    for (i, (fan_in, fan_out)) in dims.iter().enumerate() {
        let w = params.layer(&ModelSpec::weight_name(i)).unwrap().data();
        let b = params.layer(&ModelSpec::bias_name(i)).unwrap().data();
        let h = &acts[i];
        let mut z = vec![0.0; n * fan_out];
        for r in 0..n {
            let row = &h[r * fan_in..(r + 1) * fan_in];
            let out_row = &mut z[r * fan_out..(r + 1) * fan_out];
            for (o, zo) in out_row.iter_mut().enumerate() {
                let wrow = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for (x, wv) in row.iter().zip(wrow.iter()) {
                    acc += x * wv;
                }
                *zo = acc;
            }
        }
        if i + 1 < num_layers {
            for v in z.iter_mut() {
                *v = activate(spec.activation, *v);
            }
        }
        acts.push(z);
    }
    Ok(ForwardTrace { acts })
}

/// Logits for a batch laid out row-major as `n x num_classes`.
/// An empty batch yields empty logits.
pub fn forward(spec: &ModelSpec, params: &ParamSet, inputs: &[f64]) -> Result<Vec<f64>> {
    let trace = forward_trace(spec, params, inputs)?;
    Ok(trace.acts.into_iter().next_back().unwrap())
}

/// Backpropagates `dlogits` through the trace, returning gradients aligned
/// with `params`. `dlogits` must already include any 1/N batch averaging.
fn backward(
    spec: &ModelSpec,
    params: &ParamSet,
    trace: &ForwardTrace,
    dlogits: Vec<f64>,
) -> Result<ParamSet> {
    let dims = spec.layer_dims();
    let num_layers = dims.len();
    let n = trace.acts[0].len() / spec.input_dim.max(1);
    let mut grad = params.zeros_like();
    let mut delta = dlogits;

    for i in (0..num_layers).rev() {
        let (fan_in, fan_out) = dims[i];
        let h_in = &trace.acts[i];
        {
            let gw = grad
                .layer_mut_internal(&ModelSpec::weight_name(i))
                .expect("grad layout mirrors params");
            for r in 0..n {
                let drow = &delta[r * fan_out..(r + 1) * fan_out];
                let hrow = &h_in[r * fan_in..(r + 1) * fan_in];
                for (o, dv) in drow.iter().enumerate() {
                    if *dv == 0.0 {
                        continue;
                    }
                    let grow = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (g, x) in grow.iter_mut().zip(hrow.iter()) {
                        *g += dv * x;
                    }
                }
            }
        }
        {
            let gb = grad
                .layer_mut_internal(&ModelSpec::bias_name(i))
                .expect("grad layout mirrors params");
            for r in 0..n {
                let drow = &delta[r * fan_out..(r + 1) * fan_out];
                for (g, dv) in gb.iter_mut().zip(drow.iter()) {
                    *g += dv;
                }
            }
        }
        if i > 0 {
            let w = params.layer(&ModelSpec::weight_name(i)).unwrap().data();
            let mut prev = vec![0.0; n * fan_in];
            for r in 0..n {
                let drow = &delta[r * fan_out..(r + 1) * fan_out];
                let prow = &mut prev[r * fan_in..(r + 1) * fan_in];
                for (o, dv) in drow.iter().enumerate() {
                    if *dv == 0.0 {
                        continue;
                    }
                    let wrow = &w[o * fan_in..(o + 1) * fan_in];
                    for (p, wv) in prow.iter_mut().zip(wrow.iter()) {
                        *p += dv * wv;
                    }
                }
                let post = &trace.acts[i][r * fan_in..(r + 1) * fan_in];
                for (p, a) in prow.iter_mut().zip(post.iter()) {
                    *p *= activate_deriv(spec.activation, *a);
                }
            }
            delta = prev;
        }
    }
    Ok(grad)
}

fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (p, z) in out.iter_mut().zip(logits.iter()) {
        *p = (z - m).exp();
        sum += *p;
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
}

/// Mean cross-entropy over the batch plus `alpha * sum_l ||theta_l||^2`,
/// with the exact analytic gradient of that total. The L2 term is the raw
/// per-layer sum of squares over every tensor, biases included.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &[f64],
    labels: &[usize],
    l2_alpha: f64,
) -> Result<(f64, ParamSet)> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if l2_alpha < 0.0 {
        return Err(Error::InvalidConfig("l2_alpha must be >= 0".into()));
    }
    let n = labels.len();
    let c = spec.num_classes;
    if inputs.len() != n * spec.input_dim {
        return Err(Error::LayoutMismatch(format!(
            "{} inputs for {} labels at input_dim {}",
            inputs.len(),
            n,
            spec.input_dim
        )));
    }
    let trace = forward_trace(spec, params, inputs)?;
    let logits = trace.acts.last().unwrap();

    let mut ce = 0.0;
    let mut dlogits = vec![0.0; n * c];
    let mut probs = vec![0.0; c];
    for r in 0..n {
        let row = &logits[r * c..(r + 1) * c];
        let label = labels[r];
        if label >= c {
            return Err(Error::LayoutMismatch(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        ce += lse - row[label];
        softmax_row(row, &mut probs);
        let drow = &mut dlogits[r * c..(r + 1) * c];
        for (k, dv) in drow.iter_mut().enumerate() {
            let indicator = if k == label { 1.0 } else { 0.0 };
            *dv = (probs[k] - indicator) / n as f64;
        }
    }
    ce /= n as f64;

    let mut grad = backward(spec, params, &trace, dlogits)?;
    let mut l2 = 0.0;
    if l2_alpha > 0.0 {
        for (_, t) in params.layers() {
            l2 += t.data().iter().map(|v| v * v).sum::<f64>();
        }
        grad.add_scaled_internal(2.0 * l2_alpha, params)?;
    }
    Ok((ce + l2_alpha * l2, grad))
}

/// Mean prediction entropy over the batch and its exact gradient.
/// The entropy of a row with probabilities p is `-sum_k p_k ln p_k`.
pub fn entropy_and_grad(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &[f64],
) -> Result<(f64, ParamSet)> {
    if inputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let c = spec.num_classes;
    let trace = forward_trace(spec, params, inputs)?;
    let logits = trace.acts.last().unwrap();
    let n = logits.len() / c;

    let mut total = 0.0;
    let mut dlogits = vec![0.0; n * c];
    let mut probs = vec![0.0; c];
    for r in 0..n {
        let row = &logits[r * c..(r + 1) * c];
        softmax_row(row, &mut probs);
        let mut h = 0.0;
        for p in &probs {
            if *p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
        let drow = &mut dlogits[r * c..(r + 1) * c];
        for (k, dv) in drow.iter_mut().enumerate() {
            let p = probs[k];
            *dv = if p > 0.0 { -p * (p.ln() + h) / n as f64 } else { 0.0 };
        }
    }
    let grad = backward(spec, params, &trace, dlogits)?;
    Ok((total / n as f64, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the per-layer L2 penalty added to the cross-entropy.
    pub l2_alpha: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.l2_alpha < 0.0 {
            return Err(Error::InvalidConfig("l2_alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Minibatch SGD with a seeded shuffle schedule. `epochs = 0` returns the
/// initial parameters unchanged. The optional hook may rewrite each
/// minibatch gradient before the update is applied.
pub(crate) fn train_with_hook(
    spec: &ModelSpec,
    init: &ParamSet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut hook: impl FnMut(ParamSet) -> Result<ParamSet>,
) -> Result<ParamSet> {
    cfg.validate()?;
    spec.check_params(init)?;
    if data.len() == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.input_dim() != spec.input_dim || data.num_classes() > spec.num_classes {
        return Err(Error::LayoutMismatch(format!(
            "dataset ({}d, {} classes) does not fit model ({}d, {} classes)",
            data.input_dim(),
            data.num_classes(),
            spec.input_dim,
            spec.num_classes
        )));
    }

    let mut params = init.clone();
    let n = data.len();
    let d = data.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_inputs = Vec::with_capacity(cfg.batch_size * d);
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch_inputs.clear();
            batch_labels.clear();
            for &idx in chunk {
                batch_inputs.extend_from_slice(data.row(idx));
                batch_labels.push(data.label(idx));
            }
            let (_, grad) =
                loss_and_grad(spec, &params, &batch_inputs, &batch_labels, cfg.l2_alpha)?;
            let grad = hook(grad)?;
            params.sub_scaled_in_place(cfg.learning_rate, &grad)?;
        }
    }
    params.ensure_finite()?;
    Ok(params)
}

pub fn train(
    spec: &ModelSpec,
    init: &ParamSet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<ParamSet> {
    train_with_hook(spec, init, data, cfg, Ok)
}

/// Fisher-Yates driven by the ChaCha stream. Kept local so the shuffle
/// schedule is pinned by this crate, not by rand's evolving SliceRandom.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Top-1 accuracy; argmax ties resolve to the lowest class index.
    pub accuracy: f64,
    pub ce_loss: f64,
    pub mean_entropy: f64,
}

pub fn evaluate(spec: &ModelSpec, params: &ParamSet, data: &Dataset) -> Result<EvalMetrics> {
    if data.len() == 0 {
        return Err(Error::EmptyDataset);
    }
    let c = spec.num_classes;
    let logits = forward(spec, params, data.inputs())?;
    let n = data.len();
    let mut correct = 0usize;
    let mut ce = 0.0;
    let mut entropy = 0.0;
    let mut probs = vec![0.0; c];
    for r in 0..n {
        let row = &logits[r * c..(r + 1) * c];
        let label = data.label(r);
        let mut best = 0usize;
        for (k, z) in row.iter().enumerate() {
            if *z > row[best] {
                best = k;
            }
        }
        if best == label {
            correct += 1;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        ce += lse - row[label];
        softmax_row(row, &mut probs);
        for p in &probs {
            if *p > 0.0 {
                entropy -= p * p.ln();
            }
        }
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / n as f64,
        ce_loss: ce / n as f64,
        mean_entropy: entropy / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodels::{gen_dataset, Generator, Transform};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden_dims: vec![5],
            num_classes: 4,
            activation: Activation::Tanh,
            excluded_layer_patterns: vec![],
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = tiny_spec();
        let a = init_model(&spec, 7).unwrap();
        let b = init_model(&spec, 7).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = init_model(&spec, 8).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn no_hidden_dims_gives_single_linear_layer() {
        let spec = ModelSpec {
            input_dim: 4,
            hidden_dims: vec![],
            num_classes: 2,
            activation: Activation::Relu,
            excluded_layer_patterns: vec![],
        };
        let p = init_model(&spec, 0).unwrap();
        assert_eq!(p.num_layers(), 2);
        assert!(p.layer("layer0.weight").is_some());
    }

    #[test]
    fn zero_input_dim_rejected() {
        let spec = ModelSpec {
            input_dim: 0,
            hidden_dims: vec![],
            num_classes: 2,
            activation: Activation::Relu,
            excluded_layer_patterns: vec![],
        };
        assert!(matches!(init_model(&spec, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = tiny_spec();
        let zeros = init_model(&spec, 0).unwrap().zeros_like();
        let logits = forward(&spec, &zeros, &[1.0, -2.0, 0.5]).unwrap();
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_layer_scaled_identity_passes_input_through() {
        // 2x2 weight [[2,0],[0,3]] on input (x0, x1) -> (2 x0, 3 x1).
        let spec = ModelSpec {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 2,
            activation: Activation::Relu,
            excluded_layer_patterns: vec![],
        };
        let p = ParamSet::from_entries([
            ("layer0.weight".to_string(), Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap()),
            ("layer0.bias".to_string(), Tensor::zeros(vec![2])),
        ])
        .unwrap();
        let logits = forward(&spec, &p, &[1.5, -1.0]).unwrap();
        assert_eq!(logits, vec![3.0, -3.0]);
    }

    #[test]
    fn empty_batch_forward_is_empty() {
        let spec = tiny_spec();
        let p = init_model(&spec, 1).unwrap();
        let logits = forward(&spec, &p, &[]).unwrap();
        assert!(logits.is_empty());
    }

    #[test]
    fn uniform_logits_lose_ln_c() {
        let spec = tiny_spec();
        let zeros = init_model(&spec, 0).unwrap().zeros_like();
        let (loss, _) =
            loss_and_grad(&spec, &zeros, &[0.1, 0.2, 0.3, -0.5, 0.0, 1.0], &[0, 3], 0.0).unwrap();
        assert!((loss - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_loss_is_error() {
        let spec = tiny_spec();
        let p = init_model(&spec, 1).unwrap();
        assert!(matches!(
            loss_and_grad(&spec, &p, &[], &[], 0.0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn l2_contribution_is_two_alpha_theta() {
        let spec = tiny_spec();
        let p = init_model(&spec, 3).unwrap();
        let inputs = [0.3, -0.1, 0.7];
        let labels = [2usize];
        let alpha = 0.05;
        let (_, g0) = loss_and_grad(&spec, &p, &inputs, &labels, 0.0).unwrap();
        let (_, g1) = loss_and_grad(&spec, &p, &inputs, &labels, alpha).unwrap();
        let diff = crate::params::axpy(-1.0, &g0, &g1).unwrap();
        let expected = crate::params::scale(2.0 * alpha, &p).unwrap();
        for (d, e) in diff.flatten().iter().zip(expected.flatten().iter()) {
            assert!((d - e).abs() < 1e-12, "{d} vs {e}");
        }
    }

    /// Central finite differences with step h, the independent oracle for
    /// the analytic gradient.
    fn fd_grad(
        spec: &ModelSpec,
        params: &ParamSet,
        inputs: &[f64],
        labels: &[usize],
        alpha: f64,
        h: f64,
    ) -> Vec<f64> {
        let flat = params.flatten();
        let names: Vec<String> = params.layer_names().map(String::from).collect();
        let shapes: Vec<Vec<usize>> = params.layers().map(|(_, t)| t.shape().to_vec()).collect();
        let rebuild = |v: &[f64]| {
            let mut entries = Vec::new();
            let mut off = 0;
            for (name, shape) in names.iter().zip(shapes.iter()) {
                let numel: usize = shape.iter().product();
                entries.push((
                    name.clone(),
                    Tensor::new(shape.clone(), v[off..off + numel].to_vec()).unwrap(),
                ));
                off += numel;
            }
            ParamSet::from_entries(entries).unwrap()
        };
        (0..flat.len())
            .map(|i| {
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let (lp, _) = loss_and_grad(spec, &rebuild(&plus), inputs, labels, alpha).unwrap();
                let (lm, _) = loss_and_grad(spec, &rebuild(&minus), inputs, labels, alpha).unwrap();
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    /// True when the one-sided difference quotients around coordinate `i`
    /// disagree, i.e. the loss is not differentiable there.
    fn straddles_kink(
        spec: &ModelSpec,
        params: &ParamSet,
        inputs: &[f64],
        labels: &[usize],
        alpha: f64,
        i: usize,
        h: f64,
    ) -> bool {
        let flat = params.flatten();
        let names: Vec<String> = params.layer_names().map(String::from).collect();
        let shapes: Vec<Vec<usize>> = params.layers().map(|(_, t)| t.shape().to_vec()).collect();
        let eval = |delta: f64| {
            let mut v = flat.clone();
            v[i] += delta;
            let mut entries = Vec::new();
            let mut off = 0;
            for (name, shape) in names.iter().zip(shapes.iter()) {
                let numel: usize = shape.iter().product();
                entries.push((
                    name.clone(),
                    Tensor::new(shape.clone(), v[off..off + numel].to_vec()).unwrap(),
                ));
                off += numel;
            }
            let p = ParamSet::from_entries(entries).unwrap();
            loss_and_grad(spec, &p, inputs, labels, alpha).unwrap().0
        };
        let f0 = eval(0.0);
        let right = (eval(h) - f0) / h;
        let left = (f0 - eval(-h)) / h;
        let scale = right.abs().max(left.abs()).max(1e-4);
        (right - left).abs() / scale > 1e-3
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..20 {
            let spec = ModelSpec {
                input_dim: 1 + (case % 3),
                hidden_dims: if case % 2 == 0 { vec![4] } else { vec![3, 3] },
                num_classes: 2 + (case % 3),
                activation: if case % 2 == 0 { Activation::Tanh } else { Activation::Relu },
                excluded_layer_patterns: vec![],
            };
            let params = init_model(&spec, 1000 + case as u64).unwrap();
            let n = 3;
            let inputs: Vec<f64> =
                (0..n * spec.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<usize> =
                (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
            let alpha = if case % 3 == 0 { 0.0 } else { 0.02 };

            let (_, grad) = loss_and_grad(&spec, &params, &inputs, &labels, alpha).unwrap();
            let fd = fd_grad(&spec, &params, &inputs, &labels, alpha, 1e-5);
            for (i, (a, b)) in grad.flatten().iter().zip(fd.iter()).enumerate() {
                let denom = a.abs().max(b.abs()).max(1e-4);
                if (a - b).abs() / denom >= 1e-4 {
                    // A central difference is only a valid oracle where the
                    // loss is differentiable; a relu kink between x-h and
                    // x+h shows up as disagreeing one-sided slopes.
                    assert!(
                        spec.activation == Activation::Relu
                            && straddles_kink(&spec, &params, &inputs, &labels, alpha, i, 1e-5),
                        "case {case} coord {i}: analytic {a} vs fd {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let spec = tiny_spec();
        let params = init_model(&spec, 5).unwrap();
        let inputs = [0.4, -0.2, 0.9, -0.6, 0.1, 0.3];
        let (_, grad) = entropy_and_grad(&spec, &params, &inputs).unwrap();

        let flat = params.flatten();
        let names: Vec<String> = params.layer_names().map(String::from).collect();
        let shapes: Vec<Vec<usize>> = params.layers().map(|(_, t)| t.shape().to_vec()).collect();
        let h = 1e-5;
        for (i, g) in grad.flatten().iter().enumerate() {
            let eval = |delta: f64| {
                let mut v = flat.clone();
                v[i] += delta;
                let mut entries = Vec::new();
                let mut off = 0;
                for (name, shape) in names.iter().zip(shapes.iter()) {
                    let numel: usize = shape.iter().product();
                    entries.push((
                        name.clone(),
                        Tensor::new(shape.clone(), v[off..off + numel].to_vec()).unwrap(),
                    ));
                    off += numel;
                }
                let p = ParamSet::from_entries(entries).unwrap();
                entropy_and_grad(&spec, &p, &inputs).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-4);
            assert!((g - fd).abs() / denom < 1e-4, "coord {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let spec = tiny_spec();
        let init = init_model(&spec, 11).unwrap();
        let data = gen_dataset(Generator::Blobs, 3, 4, 40, &Transform::None, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, batch_size: 8, learning_rate: 0.1, l2_alpha: 0.0, seed: 0 };
        let out = train(&spec, &init, &data, &cfg).unwrap();
        assert!(out.bits_eq(&init));
    }

    #[test]
    fn training_is_deterministic() {
        let spec = tiny_spec();
        let init = init_model(&spec, 11).unwrap();
        let data = gen_dataset(Generator::Blobs, 3, 4, 60, &Transform::None, 2).unwrap();
        let cfg = TrainConfig { epochs: 5, batch_size: 8, learning_rate: 0.1, l2_alpha: 0.01, seed: 42 };
        let a = train(&spec, &init, &data, &cfg).unwrap();
        let b = train(&spec, &init, &data, &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let spec = ModelSpec {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 2,
            activation: Activation::Relu,
            excluded_layer_patterns: vec![],
        };
        let data = gen_dataset(Generator::Blobs, 2, 2, 200, &Transform::None, 3).unwrap();
        let init = init_model(&spec, 0).unwrap();
        let cfg =
            TrainConfig { epochs: 200, batch_size: 32, learning_rate: 0.1, l2_alpha: 0.0, seed: 5 };
        let trained = train(&spec, &init, &data, &cfg).unwrap();
        let metrics = evaluate(&spec, &trained, &data).unwrap();
        assert!(metrics.accuracy >= 0.99, "accuracy {}", metrics.accuracy);
    }

    #[test]
    fn l2_regularization_shrinks_norm() {
        let spec = tiny_spec();
        let init = init_model(&spec, 21).unwrap();
        let data = gen_dataset(Generator::Blobs, 3, 4, 80, &Transform::None, 4).unwrap();
        let base =
            TrainConfig { epochs: 60, batch_size: 16, learning_rate: 0.05, l2_alpha: 0.0, seed: 9 };
        let reg = TrainConfig { l2_alpha: 0.01, ..base.clone() };
        let plain = train(&spec, &init, &data, &base).unwrap();
        let shrunk = train(&spec, &init, &data, &reg).unwrap();
        assert!(shrunk.norm2() < plain.norm2());
    }

    #[test]
    fn eq1_decomposition_holds() {
        let spec = tiny_spec();
        let p = init_model(&spec, 31).unwrap();
        let inputs = [0.2, 0.1, -0.4, 0.9, -0.3, 0.5];
        let labels = [1usize, 3];
        let alpha = 0.01;
        let (with_l2, _) = loss_and_grad(&spec, &p, &inputs, &labels, alpha).unwrap();
        let (without, _) = loss_and_grad(&spec, &p, &inputs, &labels, 0.0).unwrap();
        let sumsq: f64 = p.flatten().iter().map(|v| v * v).sum();
        assert!(((with_l2 - without) - alpha * sumsq).abs() < 1e-12);
    }

    #[test]
    fn zero_params_eval_uniform_entropy_and_first_class_argmax() {
        let spec = ModelSpec {
            input_dim: 2,
            hidden_dims: vec![],
            num_classes: 4,
            activation: Activation::Relu,
            excluded_layer_patterns: vec![],
        };
        let zeros = init_model(&spec, 0).unwrap().zeros_like();
        let data = gen_dataset(Generator::Blobs, 2, 4, 400, &Transform::None, 7).unwrap();
        let m = evaluate(&spec, &zeros, &data).unwrap();
        // Round-robin labels make the set exactly balanced, and argmax of
        // all-zero logits always picks class 0.
        assert!((m.accuracy - 0.25).abs() < 1e-12);
        assert!((m.mean_entropy - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn memorizing_model_is_perfect_on_train_set() {
        let spec = ModelSpec {
            input_dim: 2,
            hidden_dims: vec![16],
            num_classes: 4,
            activation: Activation::Tanh,
            excluded_layer_patterns: vec![],
        };
        let data = gen_dataset(Generator::Blobs, 2, 4, 16, &Transform::None, 8).unwrap();
        let init = init_model(&spec, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 400,
            batch_size: 16,
            learning_rate: 0.2,
            l2_alpha: 0.0,
            seed: 2,
        };
        let trained = train(&spec, &init, &data, &cfg).unwrap();
        let m = evaluate(&spec, &trained, &data).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn empty_dataset_eval_is_error() {
        let spec = tiny_spec();
        let p = init_model(&spec, 1).unwrap();
        let data = gen_dataset(Generator::Blobs, 3, 4, 10, &Transform::None, 1)
            .unwrap()
            .take_prefix(0);
        assert!(matches!(evaluate(&spec, &p, &data), Err(Error::EmptyDataset)));
    }
}
