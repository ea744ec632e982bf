use std::sync::Arc;

use crate::commitment::{num_leaves, MerkleTree};
use crate::model::{Dataset, Mlp, ParamVector, TrainPolicy};
use crate::quant::{quantize_params, QuantModel, QuantPolicy};
use crate::randomness::{pick_indices, ver_set_size, Seed};
use crate::{Hash256, Height, ModelId};

use super::ProtocolError;

/// Everything consensus needs to know about one training task.
#[derive(Clone, Debug)]
pub struct Task {
    pub mlp: Mlp,
    pub dataset: Arc<Dataset>,
    pub train: TrainPolicy,
    pub quant: QuantPolicy,
    /// Quantization chunk in parameters; leaves hold whole chunks.
    pub chunk_size: usize,
    pub is_fine_tune: bool,
    /// Training budget for one block.
    pub max_steps: usize,
}

impl Task {
    pub fn validate(&self, leaf_size_bytes: usize) -> Result<(), ProtocolError> {
        self.train.validate(self.dataset.len())?;
        self.quant.validate()?;
        if self.chunk_size == 0 || leaf_size_bytes == 0 || leaf_size_bytes % (4 * self.chunk_size) != 0 {
            return Err(ProtocolError::Config(format!(
                "leaf size {leaf_size_bytes} must be a positive multiple of 4 × chunk size {}",
                self.chunk_size
            )));
        }
        if self.max_steps == 0 {
            return Err(ProtocolError::Config("max_steps must be at least 1".into()));
        }
        let arch = self.mlp.architecture();
        if arch.inputs != self.dataset.features() || arch.outputs != self.dataset.outputs() {
            return Err(ProtocolError::Config("architecture does not match dataset widths".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mlp.layout().dim()
    }

    /// Required quantized-loss decrement: `ε_fine` for fine-tuning tasks,
    /// `ε_quant` otherwise.
    pub fn quant_epsilon(&self) -> f32 {
        if self.is_fine_tune {
            self.train.epsilon_fine
        } else {
            self.quant.epsilon_quant
        }
    }

    pub fn num_leaves(&self, leaf_size_bytes: usize) -> usize {
        num_leaves(self.dim() * 4, leaf_size_bytes)
    }

    pub fn leaf_params(leaf_size_bytes: usize) -> usize {
        leaf_size_bytes / 4
    }
}

/// The verification subset for one block, in draw order.
pub fn ver_rows(seed: &Seed, dataset_len: usize, alpha: f64) -> Vec<usize> {
    pick_indices(seed, dataset_len, ver_set_size(alpha, dataset_len)).expect("subset size within 1..=len")
}

/// Canonical state of one model: `θ_t`, its commitment, and `θ̃_t`.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub id: ModelId,
    pub task: Arc<Task>,
    pub params: ParamVector,
    /// Merkle root over the parameter bytes.
    pub commitment: Hash256,
    pub quant: QuantModel,
    pub quant_hash: Hash256,
    /// Full-dataset loss of `params`.
    pub full_loss: f32,
    /// Number of finalized updates.
    pub version: u64,
    /// Height of the in-flight block building on this state, if any.
    pub locked_by: Option<Height>,
}

impl ModelState {
    pub fn new(id: ModelId, task: Arc<Task>, params: ParamVector, leaf_size_bytes: usize) -> Result<Self, ProtocolError> {
        let quant = quantize_params(&params, task.chunk_size)?;
        Self::with_quant(id, task, params, quant, leaf_size_bytes, 0)
    }

    fn with_quant(
        id: ModelId,
        task: Arc<Task>,
        params: ParamVector,
        quant: QuantModel,
        leaf_size_bytes: usize,
        version: u64,
    ) -> Result<Self, ProtocolError> {
        if params.layout() != task.mlp.layout() {
            return Err(ProtocolError::Config(format!("{id}: parameter layout does not match architecture")));
        }
        let commitment = MerkleTree::build(&params.value_bytes(), leaf_size_bytes)?.root();
        let full_loss = task.mlp.loss(&params, &task.dataset.full())?;
        let quant_hash = quant.hash();
        Ok(Self { id, task, params, commitment, quant, quant_hash, full_loss, version, locked_by: None })
    }

    /// Adopt a finalized update.
    pub(super) fn advance(&mut self, params: ParamVector, quant: QuantModel, leaf_size_bytes: usize) -> Result<(), ProtocolError> {
        *self = Self::with_quant(self.id, self.task.clone(), params, quant, leaf_size_bytes, self.version + 1)?;
        Ok(())
    }

    /// Canonical serialization of `θ_t`; its hash is what a lease commits to.
    pub fn content_bytes(&self) -> Vec<u8> {
        self.params.to_bytes()
    }
}
