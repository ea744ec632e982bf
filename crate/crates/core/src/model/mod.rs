//! Deterministic small-scale trainable model.
//!
//! A fixed-architecture MLP with tanh hidden layers, trained in f32 with a
//! fixed sequential summation order so that loss values and gradients are
//! bit-reproducible across runs.

mod dataset;
mod mlp;
mod params;
mod train;

pub use dataset::{Batch, Dataset, DatasetSpec, TaskKind};
pub use mlp::{Architecture, LossEval, LossKind, Mlp};
pub use params::{LayerSpan, Layout, ParamVector};
pub use train::{sgd_step, train_until, train_until_decrement, TrainOutcome, TrainPolicy};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("layout error: {0}")]
    Layout(String),
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training policy: {0}")]
    Policy(String),
    #[error("no loss decrement of {epsilon} within {steps} steps (best loss {best} from {start})")]
    NoProgress { steps: usize, start: f32, best: f32, epsilon: f32 },
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
}
