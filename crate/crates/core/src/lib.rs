//! Parameter-space model merging, a two-stage defense that makes released
//! checkpoints merge-hostile while preserving their own accuracy, and the
//! adaptive attacks that try to undo it — all on a deterministic toy-model
//! substrate small enough to verify exactly.
//!
//! Module map:
//! - [`params`]: named-tensor store, deterministic arithmetic, checkpoint
//!   file format.
//! - [`toymodels`]: MLP classifiers with exact backprop, synthetic task
//!   generators, training and evaluation.
//! - [`merging`]: weight averaging, task arithmetic, TIES, DARE and
//!   adaptive layer-wise coefficient merging.
//! - [`defense`]: density-aware finetuning plus adversarial weight
//!   negation.
//! - [`attacks`]: unmask (scaled subtraction) and graderase (orthogonal
//!   gradient projection retraining).
//! - [`analysis`]: task-vector geometry, concentration metrics and a
//!   quadratic-loss oracle.

pub mod analysis;
pub mod attacks;
pub mod defense;
pub mod error;
pub mod hashing;
pub mod merging;
pub mod params;
pub mod toymodels;

pub use error::{Error, Result};
pub use params::{
    apply_mask, axpy, load_checkpoint, save_checkpoint, scale, task_vector, MaskSet, ParamSet,
    TaskVector, Tensor,
};
