//! Parameter-space merging methods: weight averaging, task arithmetic,
//! TIES (trim / elect sign / disjoint merge), DARE preprocessing, and
//! entropy-minimizing layer-wise coefficient learning.

use crate::error::{Error, Result};
use crate::params::{axpy, task_vector, ParamSet, TaskVector};
use crate::toymodels::{entropy_and_grad, Dataset, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Wa,
    Ta,
    Ties,
    DareTies,
    Adamerging,
}

impl MergeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            MergeMethod::Wa => "wa",
            MergeMethod::Ta => "ta",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTies => "dare_ties",
            MergeMethod::Adamerging => "adamerging",
        }
    }
}

/// Settings for the entropy-minimization coefficient search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaConfig {
    pub steps: usize,
    pub lr: f64,
    /// How many unlabeled samples to use (prefix of the provided set).
    pub unlabeled_n: usize,
}

impl Default for AdaConfig {
    fn default() -> Self {
        Self { steps: 50, lr: 1e-3, unlabeled_n: 256 }
    }
}

fn default_lambda() -> f64 {
    0.3
}

fn default_keep_frac() -> f64 {
    0.2
}

/// One merge recipe. `lambda` is the task-arithmetic scale, reused as the
/// coefficient initialization for the adaptive method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_keep_frac")]
    pub ties_keep_frac: f64,
    #[serde(default)]
    pub dare_drop_p: f64,
    #[serde(default)]
    pub ada: AdaConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl MergeSpec {
    pub fn of(method: MergeMethod) -> Self {
        Self {
            method,
            lambda: default_lambda(),
            ties_keep_frac: default_keep_frac(),
            dare_drop_p: 0.0,
            ada: AdaConfig::default(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite".into()));
        }
        if !(self.ties_keep_frac > 0.0 && self.ties_keep_frac <= 1.0) {
            return Err(Error::InvalidConfig("ties_keep_frac must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dare_drop_p) {
            return Err(Error::InvalidConfig("dare_drop_p must be in [0, 1)".into()));
        }
        if self.dare_drop_p > 0.0 && self.seed.is_none() {
            return Err(Error::InvalidConfig("seed is mandatory when dare_drop_p > 0".into()));
        }
        Ok(())
    }

    /// Stable identifier used in artifact names and report rows.
    pub fn tag(&self) -> String {
        self.method.name().to_string()
    }
}

/// Elementwise arithmetic mean of two or more aligned models. The per
/// coordinate sum runs over a canonically sorted copy of the values, so
/// the result is exactly invariant to input order.
pub fn merge_wa(models: &[&ParamSet]) -> Result<ParamSet> {
    if models.len() < 2 {
        return Err(Error::InvalidConfig("weight averaging needs at least 2 models".into()));
    }
    for m in &models[1..] {
        models[0].check_aligned(m)?;
    }
    let k = models.len() as f64;
    let mut out = models[0].zeros_like();
    let mut scratch: Vec<f64> = Vec::with_capacity(models.len());
    let names: Vec<String> = models[0].layer_names().map(String::from).collect();
    for name in &names {
        let numel = models[0].layer(name).unwrap().numel();
        let dest = out.layer_mut_internal(name).unwrap();
        for j in 0..numel {
            scratch.clear();
            for m in models {
                scratch.push(m.layer(name).unwrap().data()[j]);
            }
            scratch.sort_by(|a, b| a.total_cmp(b));
            dest[j] = scratch.iter().sum::<f64>() / k;
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// Task arithmetic: `base + lambda * sum_i (model_i - base)`.
pub fn merge_ta(base: &ParamSet, models: &[&ParamSet], lambda: f64) -> Result<ParamSet> {
    for m in models {
        base.check_aligned(m)?;
    }
    if lambda == 0.0 {
        return Ok(base.clone());
    }
    let mut sum = base.zeros_like();
    for m in models {
        let tau = task_vector(m, base)?;
        sum.add_scaled_internal(1.0, &tau.delta)?;
    }
    axpy(lambda, &sum, base)
}

/// Keeps the `ceil(keep_frac * P)` globally largest-magnitude entries of
/// the flattened delta and zeroes the rest. Magnitude ties break toward
/// the earlier flatten index.
pub fn ties_trim(tau: &TaskVector, keep_frac: f64) -> Result<TaskVector> {
    if !(keep_frac > 0.0 && keep_frac <= 1.0) {
        return Err(Error::InvalidConfig("keep_frac must be in (0, 1]".into()));
    }
    let flat = tau.delta.flatten();
    let total = flat.len();
    let keep = ((keep_frac * total as f64).ceil() as usize).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|a, b| flat[*b].abs().total_cmp(&flat[*a].abs()).then(a.cmp(b)));
    let mut keep_flags = vec![false; total];
    for &idx in order.iter().take(keep) {
        keep_flags[idx] = true;
    }

    let mut delta = tau.delta.zeros_like();
    let mut cursor = 0usize;
    let names: Vec<String> = tau.delta.layer_names().map(String::from).collect();
    for name in &names {
        let numel = tau.delta.layer(name).unwrap().numel();
        let src = tau.delta.layer(name).unwrap().data().to_vec();
        let dst = delta.layer_mut_internal(name).unwrap();
        for j in 0..numel {
            if keep_flags[cursor] {
                dst[j] = src[j];
            }
            cursor += 1;
        }
    }
    Ok(TaskVector { delta, base_fingerprint: tau.base_fingerprint })
}

/// Sign election and disjoint merge of trimmed task vectors. Per
/// coordinate, the elected sign is the sign of the coordinatewise sum
/// (a zero sum contributes nothing) and the merged value is the mean of
/// the nonzero entries agreeing with that sign.
pub fn ties_merge(base: &ParamSet, taus: &[TaskVector]) -> Result<ParamSet> {
    for tau in taus {
        base.check_aligned(&tau.delta)?;
    }
    let mut out = base.clone();
    out.meta_mut().clear();
    let names: Vec<String> = base.layer_names().map(String::from).collect();
    for name in &names {
        let numel = base.layer(name).unwrap().numel();
        let columns: Vec<&[f64]> =
            taus.iter().map(|t| t.delta.layer(name).unwrap().data()).collect();
        let dest = out.layer_mut_internal(name).unwrap();
        for j in 0..numel {
            let sum: f64 = columns.iter().map(|c| c[j]).sum();
            if sum == 0.0 {
                continue;
            }
            let positive = sum > 0.0;
            let mut acc = 0.0;
            let mut count = 0usize;
            for c in &columns {
                let v = c[j];
                if v != 0.0 && (v > 0.0) == positive {
                    acc += v;
                    count += 1;
                }
            }
            if count > 0 {
                dest[j] += acc / count as f64;
            }
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// DARE preprocessing: drop each coordinate independently with probability
/// `drop_p` (seeded, flatten order) and rescale survivors by
/// `1 / (1 - drop_p)` so the expectation is preserved.
pub fn dare(tau: &TaskVector, drop_p: f64, seed: u64) -> Result<TaskVector> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::InvalidConfig("drop_p must be in [0, 1)".into()));
    }
    if drop_p == 0.0 {
        return Ok(tau.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rescale = 1.0 / (1.0 - drop_p);
    let mut delta = tau.delta.clone();
    delta.meta_mut().clear();
    let names: Vec<String> = tau.delta.layer_names().map(String::from).collect();
    for name in &names {
        let data = delta.layer_mut_internal(name).unwrap();
        for v in data.iter_mut() {
            let u: f64 = rng.random::<f64>();
            if u < drop_p {
                *v = 0.0;
            } else {
                *v *= rescale;
            }
        }
    }
    Ok(TaskVector { delta, base_fingerprint: tau.base_fingerprint })
}

/// Learned layer-wise merging coefficients, one map per input model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaCoefficients {
    pub per_model: Vec<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaOutcome {
    pub coefficients: AdaCoefficients,
    pub entropy_before: f64,
    pub entropy_after: f64,
}

/// Builds `base_l + sum_i c_{i,l} tau_{i,l}` per layer.
fn assemble_layerwise(
    base: &ParamSet,
    taus: &[TaskVector],
    coeffs: &[BTreeMap<String, f64>],
) -> Result<ParamSet> {
    let mut out = base.clone();
    out.meta_mut().clear();
    let names: Vec<String> = base.layer_names().map(String::from).collect();
    for name in &names {
        let dest = out.layer_mut_internal(name).unwrap();
        for (tau, c) in taus.iter().zip(coeffs) {
            let lam = c[name];
            for (d, t) in dest.iter_mut().zip(tau.delta.layer(name).unwrap().data()) {
                *d += lam * t;
            }
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// Layer-wise adaptive merging: coefficients start at the task-arithmetic
/// default 0.3, are optimized by gradient descent on the mean prediction
/// entropy of the merged model over unlabeled samples, and stay clamped
/// to [0, 1]. The coefficient gradient is the exact inner product
/// `<dH/dtheta_l, tau_{i,l}>`, available analytically because the merged
/// parameters are linear in the coefficients.
pub fn merge_adamerging(
    base: &ParamSet,
    models: &[&ParamSet],
    unlabeled: &Dataset,
    spec: &ModelSpec,
    cfg: &AdaConfig,
) -> Result<(ParamSet, AdaOutcome)> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("adamerging needs at least 1 model".into()));
    }
    if unlabeled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig("ada lr must be > 0".into()));
    }
    for m in models {
        base.check_aligned(m)?;
    }
    let taus: Vec<TaskVector> =
        models.iter().map(|m| task_vector(m, base)).collect::<Result<_>>()?;
    let names: Vec<String> = base.layer_names().map(String::from).collect();
    let mut coeffs: Vec<BTreeMap<String, f64>> = models
        .iter()
        .map(|_| names.iter().map(|n| (n.clone(), 0.3)).collect())
        .collect();

    let sample = unlabeled.take_prefix(cfg.unlabeled_n.max(1));
    let inputs = sample.inputs();

    let merged0 = assemble_layerwise(base, &taus, &coeffs)?;
    let (entropy_before, _) = entropy_and_grad(spec, &merged0, inputs)?;

    let mut merged = merged0;
    for _ in 0..cfg.steps {
        let (_, grad) = entropy_and_grad(spec, &merged, inputs)?;
        for (tau, c) in taus.iter().zip(coeffs.iter_mut()) {
            for name in &names {
                let g: f64 = grad
                    .layer(name)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(tau.delta.layer(name).unwrap().data())
                    .map(|(a, b)| a * b)
                    .sum();
                let lam = c.get_mut(name).unwrap();
                *lam = (*lam - cfg.lr * g).clamp(0.0, 1.0);
            }
        }
        merged = assemble_layerwise(base, &taus, &coeffs)?;
    }
    let (entropy_after, _) = entropy_and_grad(spec, &merged, inputs)?;

    Ok((
        merged,
        AdaOutcome {
            coefficients: AdaCoefficients { per_model: coeffs },
            entropy_before,
            entropy_after,
        },
    ))
}

/// Extra inputs needed by data-dependent merge methods.
pub struct MergeContext<'a> {
    pub model_spec: &'a ModelSpec,
    pub unlabeled: &'a Dataset,
}

/// Dispatches a [`MergeSpec`] over `(base, models)`. Data-dependent
/// methods require a context; data-free methods ignore it.
pub fn merge(
    spec: &MergeSpec,
    base: &ParamSet,
    models: &[&ParamSet],
    ctx: Option<&MergeContext<'_>>,
) -> Result<ParamSet> {
    spec.validate()?;
    match spec.method {
        MergeMethod::Wa => merge_wa(models),
        MergeMethod::Ta => merge_ta(base, models, spec.lambda),
        MergeMethod::Ties => {
            let taus: Vec<TaskVector> = models
                .iter()
                .map(|m| task_vector(m, base).and_then(|t| ties_trim(&t, spec.ties_keep_frac)))
                .collect::<Result<_>>()?;
            ties_merge(base, &taus)
        }
        MergeMethod::DareTies => {
            let seed = spec
                .seed
                .ok_or_else(|| Error::InvalidConfig("dare_ties requires a seed".into()))?;
            let taus: Vec<TaskVector> = models
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let tau = task_vector(m, base)?;
                    let dropped = dare(&tau, spec.dare_drop_p, seed.wrapping_add(i as u64))?;
                    ties_trim(&dropped, spec.ties_keep_frac)
                })
                .collect::<Result<_>>()?;
            ties_merge(base, &taus)
        }
        MergeMethod::Adamerging => {
            let ctx = ctx.ok_or_else(|| {
                Error::UnsupportedMerge("adamerging needs a model spec and unlabeled data".into())
            })?;
            merge_adamerging(base, models, ctx.unlabeled, ctx.model_spec, &spec.ada)
                .map(|(merged, _)| merged)
        }
    }
}
