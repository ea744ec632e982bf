use crate::commitment::MerkleTree;
use crate::market::PriceProposal;
use crate::model::{train_until, ModelError, ParamVector};
use crate::quant::{quantize_params, quantized_loss, QuantModel};
use crate::randomness::{vrf_prove, SecretKey, Seed};
use crate::{Hash256, Height, ParticipantId};

use super::types::Block;
use super::{ModelState, ProtocolError};

/// What a proposer sees when building the block at `height`.
#[derive(Clone, Debug)]
pub struct BlockContext<'a> {
    pub height: Height,
    pub parent_hash: Hash256,
    pub model: &'a ModelState,
    pub minibatch_seed: Seed,
    /// `D_ver` for this block.
    pub ver_rows: &'a [usize],
    pub leaf_size_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedUpdate {
    pub params: ParamVector,
    pub steps: usize,
    /// Full-dataset losses.
    pub loss_before: f32,
    pub loss_after: f32,
    pub quant: QuantModel,
    /// Quantized losses on `D_ver`.
    pub quant_loss_before: f32,
    pub quant_loss_after: f32,
}

/// Honest training: SGD until both the full-precision decrement and the
/// quantized decrement on `D_ver` hold. Running out of steps is
/// [`ProtocolError::NoBlock`].
pub fn train_for_block(ctx: &BlockContext<'_>) -> Result<TrainedUpdate, ProtocolError> {
    let state = ctx.model;
    let task = &state.task;
    let ver = task.dataset.batch(ctx.ver_rows)?;
    let quant_before = quantized_loss(&task.mlp, &state.quant, &ver)?;
    let target = quant_before - task.quant_epsilon();
    let mut last: Option<(QuantModel, f32)> = None;
    let outcome = train_until(
        &task.mlp,
        &state.params,
        &task.dataset,
        &task.train,
        task.max_steps,
        &ctx.minibatch_seed,
        |params, _| {
            let Ok(q) = quantize_params(params, task.chunk_size) else { return false };
            let Ok(loss) = quantized_loss(&task.mlp, &q, &ver) else { return false };
            let ok = loss < target;
            if ok {
                last = Some((q, loss));
            }
            ok
        },
    )
    .map_err(|e| match e {
        e @ ModelError::NoProgress { .. } => ProtocolError::NoBlock(e),
        e => ProtocolError::Model(e),
    })?;
    let (quant, quant_loss_after) = last.expect("accepted step recorded its quantization");
    Ok(TrainedUpdate {
        params: outcome.params,
        steps: outcome.steps,
        loss_before: outcome.loss_before,
        loss_after: outcome.loss_after,
        quant,
        quant_loss_before: quant_before,
        quant_loss_after,
    })
}

/// A block together with the private material its proposer keeps to answer
/// challenges and publish the quantized model.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub block: Block,
    pub committed: ParamVector,
    pub tree: MerkleTree,
    pub quant: QuantModel,
}

/// Commit to `committed` and build the block header. Nothing here checks
/// that the claims are true; strategies use this to assemble dishonest
/// blocks.
#[allow(clippy::too_many_arguments)]
pub fn assemble_proposal(
    ctx: &BlockContext<'_>,
    proposer: ParticipantId,
    secret: &SecretKey,
    leader_seed: &Seed,
    committed: ParamVector,
    quant: QuantModel,
    claimed_loss_after: f32,
    price_proposal: PriceProposal,
) -> Result<Proposal, ProtocolError> {
    let tree = MerkleTree::build(&committed.value_bytes(), ctx.leaf_size_bytes)?;
    let block = Block {
        height: ctx.height,
        parent_hash: ctx.parent_hash,
        proposer,
        model_id: ctx.model.id,
        base_commitment: ctx.model.commitment,
        hash_full_model32: tree.root(),
        hash_quant4: quant.hash(),
        vrf_proof: vrf_prove(secret, leader_seed),
        claimed_loss_before: ctx.model.full_loss,
        claimed_loss_after,
        price_proposal,
    };
    Ok(Proposal { block, committed, tree, quant })
}

/// The honest proposer: train, then commit to exactly what was trained.
pub fn propose_block(
    ctx: &BlockContext<'_>,
    proposer: ParticipantId,
    secret: &SecretKey,
    leader_seed: &Seed,
    price_proposal: PriceProposal,
) -> Result<(Proposal, TrainedUpdate), ProtocolError> {
    let update = train_for_block(ctx)?;
    let proposal = assemble_proposal(
        ctx,
        proposer,
        secret,
        leader_seed,
        update.params.clone(),
        update.quant.clone(),
        update.loss_after,
        price_proposal,
    )?;
    Ok((proposal, update))
}
