//! Two-stage weight protection against unauthorized merging.
//!
//! Stage 1 (density-aware finetuning) continues training the released
//! model with a per-layer L2 penalty, spreading task-relevant mass across
//! many small-magnitude coordinates. Stage 2 (adversarial weight
//! negation) is training-free: it probes which layers are critical,
//! builds a binary mask over the most significant task-vector
//! coordinates of the remaining layers, and resets those coordinates
//! toward the pretrained values. The protected model keeps its accuracy
//! while merges built on top of it collapse.

use crate::error::{Error, Result};
use crate::params::{MaskSet, ParamSet};
use crate::toymodels::{evaluate, train, Dataset, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};

fn default_alpha() -> f64 {
    0.01
}

fn default_beta() -> f64 {
    1.0
}

fn default_k_prime() -> f64 {
    10.0
}

fn default_k() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// L2 weight for stage-1 finetuning.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Negation strength; 1 resets masked coordinates to the pretrained
    /// values exactly.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Percent of layers protected as critical (10 means 10%).
    #[serde(default = "default_k_prime")]
    pub k_prime: f64,
    /// Fraction of remaining parameters that get perturbed.
    #[serde(default = "default_k")]
    pub k: f64,
    /// Name globs for layers that must never be perturbed.
    #[serde(default)]
    pub excluded_layer_patterns: Vec<String>,
    /// Training settings for stage 1; its `l2_alpha` is overridden by
    /// `alpha`.
    pub stage1_train: TrainConfig,
    #[serde(default = "default_true")]
    pub run_stage1: bool,
    #[serde(default = "default_true")]
    pub run_stage2: bool,
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.k_prime) {
            return Err(Error::InvalidConfig("k_prime must be in [0, 100]".into()));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::InvalidConfig("k must be in (0, 1]".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::InvalidConfig("beta must be >= 0".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidConfig("alpha must be >= 0".into()));
        }
        Ok(())
    }
}

/// Accuracy drop caused by reverting each layer to its pretrained values,
/// one entry per layer in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub entries: Vec<(String, f64)>,
}

impl LayerImportance {
    /// Layer names ranked by descending drop; ties break lexicographically.
    pub fn ranked(&self) -> Vec<&str> {
        let mut order: Vec<&(String, f64)> = self.entries.iter().collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        order.into_iter().map(|(n, _)| n.as_str()).collect()
    }
}

/// Stage 1: continue training the released model on its own task with the
/// density L2 penalty. Returns the dispersed model.
pub fn stage1_finetune(
    spec: &ModelSpec,
    theta_def: &ParamSet,
    train_data: &Dataset,
    cfg: &DefenseConfig,
) -> Result<ParamSet> {
    cfg.validate()?;
    let train_cfg = TrainConfig { l2_alpha: cfg.alpha, ..cfg.stage1_train.clone() };
    let mut out = train(spec, theta_def, train_data, &train_cfg)?;
    out.set_meta("defense.stage", "stage1");
    Ok(out)
}

/// Stage-2 probe: for each layer, rebuild the model with that layer's
/// parameters replaced by the pretrained ones and record the accuracy
/// drop on the validation split.
pub fn probe_layer_importance(
    spec: &ModelSpec,
    theta: &ParamSet,
    theta_pre: &ParamSet,
    val: &Dataset,
) -> Result<LayerImportance> {
    theta.check_aligned(theta_pre)?;
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let base_acc = evaluate(spec, theta, val)?.accuracy;
    let names: Vec<String> = theta.layer_names().map(String::from).collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in &names {
        let mut swapped = theta.clone();
        let src = theta_pre.layer(name).unwrap().data().to_vec();
        swapped
            .layer_mut_internal(name)
            .unwrap()
            .copy_from_slice(&src);
        let acc = evaluate(spec, &swapped, val)?.accuracy;
        entries.push((name.clone(), base_acc - acc));
    }
    Ok(LayerImportance { entries })
}

/// Simple name glob: `*` matches any run of characters.
pub fn glob_match(pattern: &str, text: &str) -> bool {
    if !pattern.contains('*') {
        return pattern == text;
    }
    let parts: Vec<&str> = pattern.split('*').collect();
    let first = parts[0];
    if !text.starts_with(first) {
        return false;
    }
    let mut pos = first.len();
    for part in &parts[1..parts.len() - 1] {
        if part.is_empty() {
            continue;
        }
        match text[pos..].find(part) {
            Some(i) => pos += i + part.len(),
            None => return false,
        }
    }
    let last = parts[parts.len() - 1];
    if last.is_empty() {
        return true;
    }
    text.len() >= pos + last.len() && text.ends_with(last)
}

/// Builds the stage-2 mask. Critical layers (the top `ceil(k'% * L)` by
/// importance, plus any layer matching an excluded pattern) get all-zero
/// entries. Among the parameters of the remaining layers, the
/// `floor(k * count)` largest `|theta' - theta_pre|` magnitudes get ones;
/// magnitude ties break toward the earlier flatten index.
pub fn build_mask(
    theta_prime: &ParamSet,
    theta_pre: &ParamSet,
    importance: &LayerImportance,
    cfg: &DefenseConfig,
) -> Result<MaskSet> {
    cfg.validate()?;
    theta_prime.check_aligned(theta_pre)?;
    let layer_count = theta_prime.num_layers();
    if importance.entries.len() != layer_count {
        return Err(Error::InvalidConfig(format!(
            "importance table has {} entries for {} layers",
            importance.entries.len(),
            layer_count
        )));
    }

    let critical_count =
        ((cfg.k_prime / 100.0) * layer_count as f64).ceil() as usize;
    let ranked = importance.ranked();
    let mut is_protected: Vec<(String, bool)> = theta_prime
        .layer_names()
        .map(|n| {
            let excluded = cfg
                .excluded_layer_patterns
                .iter()
                .any(|p| glob_match(p, n));
            (n.to_string(), excluded)
        })
        .collect();
    for name in ranked.iter().take(critical_count.min(layer_count)) {
        for (n, protected) in is_protected.iter_mut() {
            if n == name {
                *protected = true;
            }
        }
    }
    let protected: std::collections::BTreeMap<&str, bool> =
        is_protected.iter().map(|(n, p)| (n.as_str(), *p)).collect();

    // Global significance ranking over the non-critical pool.
    let mut magnitudes: Vec<(f64, usize)> = Vec::new();
    let mut flat_index = 0usize;
    for (name, tensor) in theta_prime.layers() {
        let pre = theta_pre.layer(name).unwrap().data();
        let keep = !protected[name];
        for (a, b) in tensor.data().iter().zip(pre) {
            if keep {
                magnitudes.push(((a - b).abs(), flat_index));
            }
            flat_index += 1;
        }
    }
    let pool = magnitudes.len();
    let ones = ((cfg.k * pool as f64).floor() as usize).min(pool);
    magnitudes.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut one_flags = vec![false; theta_prime.num_params()];
    for (_, idx) in magnitudes.iter().take(ones) {
        one_flags[*idx] = true;
    }

    let mut mask = theta_prime.zeros_like();
    let mut cursor = 0usize;
    let names: Vec<String> = theta_prime.layer_names().map(String::from).collect();
    for name in &names {
        let data = mask.layer_mut_internal(name).unwrap();
        for v in data.iter_mut() {
            if one_flags[cursor] {
                *v = 1.0;
            }
            cursor += 1;
        }
    }
    MaskSet::new(mask)
}

/// Stage 2 negation: `theta_hat = theta' - beta * (M ⊙ (theta' - theta_pre))`.
/// Masked coordinates are computed in the convex form
/// `(1 - beta) * theta' + beta * theta_pre`, so beta = 1 resets them to the
/// pretrained values exactly and beta = 0 is the identity.
pub fn stage2_negate(
    theta_prime: &ParamSet,
    theta_pre: &ParamSet,
    mask: &MaskSet,
    beta: f64,
) -> Result<ParamSet> {
    if beta < 0.0 {
        return Err(Error::InvalidConfig("beta must be >= 0".into()));
    }
    theta_prime.check_aligned(theta_pre)?;
    theta_prime.check_aligned(mask.as_params())?;
    let mut out = theta_prime.clone();
    out.meta_mut().clear();
    let names: Vec<String> = theta_prime.layer_names().map(String::from).collect();
    for name in &names {
        let pre = theta_pre.layer(name).unwrap().data().to_vec();
        let m = mask.as_params().layer(name).unwrap().data().to_vec();
        let data = out.layer_mut_internal(name).unwrap();
        for ((v, p), mv) in data.iter_mut().zip(pre).zip(m) {
            if mv == 1.0 {
                *v = (1.0 - beta) * *v + beta * p;
            }
        }
    }
    out.ensure_finite()?;
    Ok(out)
}

/// Everything the defense decided, for the provenance report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectReport {
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
    pub k_prime: f64,
    pub run_stage1: bool,
    pub run_stage2: bool,
    pub importance: Vec<(String, f64)>,
    pub critical_layers: Vec<String>,
    pub excluded_layers: Vec<String>,
    pub mask_ones: usize,
    pub mask_total: usize,
    pub per_layer_density: Vec<(String, f64)>,
    pub warning: Option<String>,
}

/// Full pipeline: stage 1 -> probe -> mask -> negate. Stage flags in the
/// config allow stage1-only and stage2-only ablations; with both stages
/// off the input comes back bit-identical.
pub fn protect(
    spec: &ModelSpec,
    theta_def: &ParamSet,
    theta_pre: &ParamSet,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &DefenseConfig,
) -> Result<(ParamSet, ProtectReport)> {
    cfg.validate()?;
    spec.check_params(theta_def)?;
    theta_def.check_aligned(theta_pre)?;

    // The architecture's own protected-layer globs join the config's.
    let mut effective = cfg.clone();
    for p in &spec.excluded_layer_patterns {
        if !effective.excluded_layer_patterns.contains(p) {
            effective.excluded_layer_patterns.push(p.clone());
        }
    }

    let theta_prime = if effective.run_stage1 {
        stage1_finetune(spec, theta_def, train_data, &effective)?
    } else {
        theta_def.clone()
    };

    let mut report = ProtectReport {
        alpha: effective.alpha,
        beta: effective.beta,
        k: effective.k,
        k_prime: effective.k_prime,
        run_stage1: effective.run_stage1,
        run_stage2: effective.run_stage2,
        importance: Vec::new(),
        critical_layers: Vec::new(),
        excluded_layers: Vec::new(),
        mask_ones: 0,
        mask_total: theta_def.num_params(),
        per_layer_density: Vec::new(),
        warning: None,
    };

    let mut theta_hat = if effective.run_stage2 {
        let importance = probe_layer_importance(spec, &theta_prime, theta_pre, val_data)?;
        let mask = build_mask(&theta_prime, theta_pre, &importance, &effective)?;

        let critical_count =
            ((effective.k_prime / 100.0) * theta_prime.num_layers() as f64).ceil() as usize;
        report.critical_layers = importance
            .ranked()
            .into_iter()
            .take(critical_count)
            .map(String::from)
            .collect();
        report.excluded_layers = theta_prime
            .layer_names()
            .filter(|n| {
                effective
                    .excluded_layer_patterns
                    .iter()
                    .any(|p| glob_match(p, n))
            })
            .map(String::from)
            .collect();
        report.importance = importance.entries.clone();
        report.mask_ones = mask.count_ones();
        report.per_layer_density = mask.per_layer_density();
        if report.mask_ones == 0 && !theta_prime.is_empty() {
            report.warning = Some("mask is all-zero; stage 2 is the identity".into());
        }
        stage2_negate(&theta_prime, theta_pre, &mask, effective.beta)?
    } else {
        theta_prime.clone()
    };

    theta_hat.set_meta("defense.stage1", if effective.run_stage1 { "on" } else { "off" });
    theta_hat.set_meta("defense.stage2", if effective.run_stage2 { "on" } else { "off" });
    theta_hat.set_meta("defense.alpha", format!("{}", effective.alpha));
    theta_hat.set_meta("defense.beta", format!("{}", effective.beta));
    Ok((theta_hat, report))
}
