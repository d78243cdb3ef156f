//! Adaptive free-rider countermeasures: scaled parameter subtraction
//! (unmask) and retraining with gradients projected orthogonal to an
//! estimated disturbance direction (graderase).

use crate::error::{Error, Result};
use crate::merging::{merge, MergeContext, MergeSpec};
use crate::params::{axpy, scale, task_vector, ParamSet};
use crate::toymodels::{train_with_hook, Dataset, ModelSpec, TrainConfig};
use serde::{Deserialize, Serialize};

/// How the attacker estimates the defender's hidden disturbance vector.
/// Only the observable protected task vector is available to a white-box
/// free-rider; the enum leaves room for other estimators without touching
/// call sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbEstimator {
    ProtectedTaskVector,
}

impl Default for DisturbEstimator {
    fn default() -> Self {
        DisturbEstimator::ProtectedTaskVector
    }
}

fn default_unmask_lambda() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEraseConfig {
    /// Fraction of the defender-task training data the attacker holds.
    pub retrain_data_frac: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl GradEraseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.retrain_data_frac > 0.0 && self.retrain_data_frac <= 1.0) {
            return Err(Error::InvalidConfig("retrain_data_frac must be in (0, 1]".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("graderase lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("graderase batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(default = "default_unmask_lambda")]
    pub unmask_lambda: f64,
    pub graderase: GradEraseConfig,
    #[serde(default)]
    pub disturb_estimator: DisturbEstimator,
}

/// Unmask: merge the three models, then subtract `lambda` times the full
/// protected parameters (not the task vector — the formula is literal).
/// Data-dependent merge methods are rejected; this attack is data-free.
pub fn unmask(
    theta_pre: &ParamSet,
    theta_hat_def: &ParamSet,
    theta_fr: &ParamSet,
    merge_spec: &MergeSpec,
    lambda: f64,
) -> Result<ParamSet> {
    theta_pre.check_aligned(theta_hat_def)?;
    theta_pre.check_aligned(theta_fr)?;
    let merged = merge(
        merge_spec,
        theta_pre,
        &[theta_hat_def, theta_fr],
        None::<&MergeContext<'_>>,
    )?;
    let negated = scale(-lambda, theta_hat_def)?;
    axpy(1.0, &negated, &merged)
}

/// `v_disturb = -(theta_hat_def - theta_pre)` under the
/// protected-task-vector estimator.
pub fn estimate_disturbance(
    theta_hat_def: &ParamSet,
    theta_pre: &ParamSet,
) -> Result<ParamSet> {
    let tau = task_vector(theta_hat_def, theta_pre)?;
    scale(-1.0, &tau.delta)
}

/// Removes the component of `g` along `v`:
/// `g' = g - (<g, v> / ||v||^2) v`. A zero `v` leaves `g` unchanged.
pub fn project_gradient(g: &ParamSet, v: &ParamSet) -> Result<ParamSet> {
    g.check_aligned(v)?;
    let vnorm2 = v.dot(v)?;
    if vnorm2 == 0.0 {
        return Ok(g.clone());
    }
    let coeff = g.dot(v)? / vnorm2;
    let correction = scale(-coeff, v)?;
    axpy(1.0, &correction, g)
}

/// Retrains the attacker's merged model on a small slice of defender-task
/// data, replacing every minibatch gradient with its projection orthogonal
/// to `v_disturb`. With a zero disturbance this is exactly plain
/// finetuning at the same seed.
pub fn graderase_retrain(
    spec: &ModelSpec,
    theta_hat_merge: &ParamSet,
    v_disturb: &ParamSet,
    data_subset: &Dataset,
    cfg: &GradEraseConfig,
) -> Result<ParamSet> {
    cfg.validate()?;
    theta_hat_merge.check_aligned(v_disturb)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.lr,
        l2_alpha: 0.0,
        seed: cfg.seed,
    };
    train_with_hook(spec, theta_hat_merge, data_subset, &train_cfg, |g| {
        project_gradient(&g, v_disturb)
    })
}
