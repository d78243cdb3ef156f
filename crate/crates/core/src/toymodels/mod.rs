//! Desk-scale model substrate: MLP classifiers with exact analytic
//! backpropagation, synthetic dataset generators, deterministic training
//! and evaluation.

mod data;
mod model;

pub use data::{gen_dataset, Dataset, Generator, Split, Transform};
pub use model::{
    entropy_and_grad, evaluate, forward, init_model, loss_and_grad, train, Activation,
    EvalMetrics, ModelSpec, TrainConfig,
};

pub(crate) use model::train_with_hook;
