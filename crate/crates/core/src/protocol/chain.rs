use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::commitment::MerkleTree;
use crate::ledger::Ledger;
use crate::market::{
    charge_training_step, enforce_upload_window, expire_leases, nudge_prices, MarketParams, ModelLease, PriceState,
    UploadStatus,
};
use crate::model::ParamVector;
use crate::quant::QuantModel;
use crate::randomness::{derive_seed, pick_indices, pick_stake_weighted, vrf_verify, Purpose, Seed};
use crate::store::ContentStore;
use crate::{Hash256, Height, ModelId, ParticipantId, Tokens};

use super::finalize::Outcome;
use super::task::ver_rows;
use super::types::{Attestation, Block, FinalizationPolicy, StakeTable};
use super::verify::attestations_digest;
use super::{ModelState, ProtocolError};

/// Why a block header was refused on receipt. Such a block never enters the
/// pipeline and its proposer is not slashed.
#[derive(Clone, Debug, Error, PartialEq, Serialize)]
pub enum HeaderError {
    #[error("block is for height {got}, expected {expected}")]
    WrongHeight { expected: Height, got: Height },
    #[error("parent hash does not match the chain")]
    WrongParent,
    #[error("proposer {got} is not the elected leader {expected}")]
    WrongLeader { expected: ParticipantId, got: ParticipantId },
    #[error("leader VRF proof does not verify")]
    BadVrf,
    #[error("block trains {got}, the lottery picked {expected:?}")]
    WrongModel { expected: Option<ModelId>, got: ModelId },
    #[error("base commitment is not the canonical state of the model")]
    WrongBase,
    #[error("claimed starting loss {claimed} differs from canonical {canonical}")]
    ClaimMismatch { claimed: f32, canonical: f32 },
    #[error("claimed loss {after} is not below {before} − ε")]
    ClaimsNotImproved { before: f32, after: f32 },
}

/// Fee escrowed for an in-flight block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Pool {
    pub model: ModelId,
    pub amount: Tokens,
}

/// What one finalization did to balances and models.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AppliedFinalization {
    pub outcome: Outcome,
    pub pool: Tokens,
    /// Stake actually removed from the proposer.
    pub slashed: Tokens,
    /// Pool returned to the lease's compute balance after a rejection.
    pub refunded: Tokens,
    /// Pool burned because its lease no longer exists.
    pub pool_burned: Tokens,
    pub model_advanced: bool,
    pub prices: PriceState,
}

/// Market events from the start-of-height housekeeping.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Housekeeping {
    pub expired: Vec<ModelId>,
    pub voided: Vec<(ModelId, Tokens)>,
}

/// Replicated state every honest node agrees on.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub genesis: Hash256,
    headers: Vec<Hash256>,
    pub stakes: StakeTable,
    pub ledger: Ledger,
    pub models: BTreeMap<ModelId, ModelState>,
    pub leases: BTreeMap<ModelId, ModelLease>,
    pub prices: PriceState,
    pub pools: BTreeMap<Height, Pool>,
    pub policy: FinalizationPolicy,
    pub market: MarketParams,
    pub alpha: f64,
    pub leaf_size_bytes: usize,
    initial_supply: Tokens,
}

#[derive(Clone, Debug)]
pub struct ChainSetup {
    pub seed: u64,
    pub stakes: StakeTable,
    pub ledger: Ledger,
    pub models: BTreeMap<ModelId, ModelState>,
    pub leases: BTreeMap<ModelId, ModelLease>,
    pub prices: PriceState,
    pub policy: FinalizationPolicy,
    pub market: MarketParams,
    pub alpha: f64,
    pub leaf_size_bytes: usize,
}

impl ChainState {
    pub fn new(setup: ChainSetup) -> Result<Self, ProtocolError> {
        setup.policy.validate()?;
        setup.market.validate()?;
        setup.prices.validate()?;
        if !(setup.alpha > 0.0 && setup.alpha <= 1.0) {
            return Err(ProtocolError::Config("alpha must be in (0, 1]".into()));
        }
        for (id, m) in &setup.models {
            if *id != m.id {
                return Err(ProtocolError::Config(format!("model map key {id} holds state for {}", m.id)));
            }
            m.task.validate(setup.leaf_size_bytes)?;
        }
        let mut chain = Self {
            genesis: Hash256::of_parts(&[b"genesis", &setup.seed.to_le_bytes()]),
            headers: Vec::new(),
            stakes: setup.stakes,
            ledger: setup.ledger,
            models: setup.models,
            leases: setup.leases,
            prices: setup.prices,
            pools: BTreeMap::new(),
            policy: setup.policy,
            market: setup.market,
            alpha: setup.alpha,
            leaf_size_bytes: setup.leaf_size_bytes,
            initial_supply: Tokens::ZERO,
        };
        chain.initial_supply = chain.supply();
        Ok(chain)
    }

    /// Number of sealed headers; also the next height to seal.
    pub fn sealed(&self) -> Height {
        self.headers.len() as Height
    }

    pub fn header_hash(&self, height: Height) -> Result<Hash256, ProtocolError> {
        self.headers.get(height as usize).copied().ok_or(ProtocolError::FutureHeight {
            requested: height,
            sealed: self.sealed().checked_sub(1),
        })
    }

    pub fn headers(&self) -> &[Hash256] {
        &self.headers
    }

    /// Hash of the header preceding `height`; genesis for height 0.
    pub fn parent_hash(&self, height: Height) -> Result<Hash256, ProtocolError> {
        match height {
            0 => Ok(self.genesis),
            h => self.header_hash(h - 1),
        }
    }

    /// Close `height`: its header binds the parent, the block proposed at it
    /// (if any), the attestations gossiped since the previous header, and a
    /// digest of everything else that happened (transactions, settlements).
    pub fn seal(
        &mut self,
        height: Height,
        block: Option<&Block>,
        attestations: &[Attestation],
        events: &Hash256,
    ) -> Result<Hash256, ProtocolError> {
        if height != self.sealed() {
            return Err(ProtocolError::OutOfOrderSeal { expected: self.sealed(), got: height });
        }
        let parent = self.parent_hash(height)?;
        let block_hash = block.map_or(Hash256::ZERO, Block::hash);
        let header = Hash256::of_parts(&[
            b"pogo/header",
            parent.as_bytes(),
            &height.to_le_bytes(),
            block_hash.as_bytes(),
            attestations_digest(attestations).as_bytes(),
            events.as_bytes(),
        ]);
        self.headers.push(header);
        Ok(header)
    }

    /// Seeds for the block at `height` come from its parent header, so they
    /// are fixed before the block exists.
    pub fn seed(&self, height: Height, purpose: Purpose) -> Result<Seed, ProtocolError> {
        Ok(derive_seed(&self.parent_hash(height)?, height, purpose))
    }

    /// Seed for the leaf challenge against the block proposed at
    /// `block_height`, drawn from the header at `block_height + w/2`, which
    /// is sealed only after the block's commitments are fixed.
    pub fn leaf_challenge_seed(&self, block_height: Height) -> Result<Seed, ProtocolError> {
        let at = block_height + self.policy.challenge_offset();
        Ok(derive_seed(&self.header_hash(at)?, at, Purpose::LeafChallenge))
    }

    pub fn ver_rows(&self, height: Height, model: ModelId) -> Result<Vec<usize>, ProtocolError> {
        let state = self.models.get(&model).ok_or(ProtocolError::UnknownModel(model))?;
        Ok(ver_rows(&self.seed(height, Purpose::VerSet)?, state.task.dataset.len(), self.alpha))
    }

    /// Every token in existence, wherever it sits.
    pub fn supply(&self) -> Tokens {
        self.stakes.total()
            + self.ledger.liquid_total()
            + self.leases.values().map(|l| l.escrow + l.compute_balance).sum()
            + self.pools.values().map(|p| p.amount).sum()
            + self.ledger.burned()
    }

    pub fn initial_supply(&self) -> Tokens {
        self.initial_supply
    }

    pub fn conserved(&self) -> bool {
        self.supply() == self.initial_supply
    }

    /// Start-of-height market maintenance: drop expired leases and void
    /// leases whose bytes missed the upload window. Models without a lease
    /// leave the registry.
    pub fn housekeeping(&mut self, store: &ContentStore, now: Height) -> Housekeeping {
        let mut events = Housekeeping::default();
        for lease in expire_leases(&mut self.leases, &mut self.ledger, now) {
            self.models.remove(&lease.model_id);
            events.expired.push(lease.model_id);
        }
        let ids: Vec<ModelId> = self.leases.keys().copied().collect();
        for id in ids {
            let lease = self.leases.get_mut(&id).expect("listed above");
            if let UploadStatus::Voided { penalty, .. } = enforce_upload_window(lease, store, &mut self.ledger, &self.market, now) {
                self.leases.remove(&id);
                self.models.remove(&id);
                events.voided.push((id, penalty));
            }
        }
        events
    }

    /// Models a block at `now` may train: live, uploaded, not already being
    /// updated by an in-flight block, and able to pay one step fee.
    pub fn eligible_models(&self, store: &ContentStore, now: Height) -> Vec<ModelId> {
        self.models
            .values()
            .filter(|m| m.locked_by.is_none())
            .filter(|m| {
                self.leases.get(&m.id).is_some_and(|l| {
                    !l.is_expired(now)
                        && l.is_uploaded(store)
                        && l.compute_balance >= l.step_fee(&self.prices, m.task.is_fine_tune)
                })
            })
            .map(|m| m.id)
            .collect()
    }

    /// The model lottery: uniform over eligible models in id order.
    pub fn pick_model(&self, height: Height, store: &ContentStore) -> Result<Option<ModelId>, ProtocolError> {
        let eligible = self.eligible_models(store, height);
        if eligible.is_empty() {
            return Ok(None);
        }
        let i = pick_indices(&self.seed(height, Purpose::ModelPick)?, eligible.len(), 1)?[0];
        Ok(Some(eligible[i]))
    }

    /// Stake-weighted leader for `height`. `forced` replaces the draw; every
    /// node applies the same override, so validation stays consistent.
    pub fn expected_leader(&self, height: Height, forced: Option<&ParticipantId>) -> Result<ParticipantId, ProtocolError> {
        match forced {
            Some(id) => Ok(id.clone()),
            None => Ok(pick_stake_weighted(&self.seed(height, Purpose::Leader)?, self.stakes.stakes())?),
        }
    }

    /// Checks every honest node runs on receipt of a block header.
    pub fn validate_header(
        &self,
        block: &Block,
        height: Height,
        store: &ContentStore,
        forced_leader: Option<&ParticipantId>,
    ) -> Result<Result<(), HeaderError>, ProtocolError> {
        if block.height != height {
            return Ok(Err(HeaderError::WrongHeight { expected: height, got: block.height }));
        }
        if block.parent_hash != self.parent_hash(height)? {
            return Ok(Err(HeaderError::WrongParent));
        }
        let leader = self.expected_leader(height, forced_leader)?;
        if block.proposer != leader {
            return Ok(Err(HeaderError::WrongLeader { expected: leader, got: block.proposer.clone() }));
        }
        let seed = self.seed(height, Purpose::Leader)?;
        if !vrf_verify(|id| self.stakes.key(id), &block.proposer, &seed, &block.vrf_proof)? {
            return Ok(Err(HeaderError::BadVrf));
        }
        let picked = self.pick_model(height, store)?;
        if picked != Some(block.model_id) {
            return Ok(Err(HeaderError::WrongModel { expected: picked, got: block.model_id }));
        }
        let state = &self.models[&block.model_id];
        if block.base_commitment != state.commitment {
            return Ok(Err(HeaderError::WrongBase));
        }
        if block.claimed_loss_before.to_bits() != state.full_loss.to_bits() {
            return Ok(Err(HeaderError::ClaimMismatch { claimed: block.claimed_loss_before, canonical: state.full_loss }));
        }
        let epsilon = state.task.train.epsilon;
        let improved = block.claimed_loss_after < block.claimed_loss_before - epsilon;
        if !improved {
            return Ok(Err(HeaderError::ClaimsNotImproved {
                before: block.claimed_loss_before,
                after: block.claimed_loss_after,
            }));
        }
        Ok(Ok(()))
    }

    /// Admit a validated block: charge one step fee into its reward pool and
    /// lock the model until `N + w`.
    pub fn open_block(&mut self, block: &Block) -> Result<Tokens, ProtocolError> {
        let state = self.models.get_mut(&block.model_id).ok_or(ProtocolError::UnknownModel(block.model_id))?;
        let lease = self.leases.get_mut(&block.model_id).ok_or(ProtocolError::UnknownModel(block.model_id))?;
        let amount = charge_training_step(lease, &self.prices, state.task.is_fine_tune)?;
        state.locked_by = Some(block.height);
        self.pools.insert(block.height, Pool { model: block.model_id, amount });
        Ok(amount)
    }

    /// Settle the block proposed at `block.height` given the aggregation
    /// outcome. On finalization `update` must be the committed parameters and
    /// the published quantized model.
    pub fn apply_finalization(
        &mut self,
        block: &Block,
        outcome: Outcome,
        update: Option<(ParamVector, QuantModel)>,
    ) -> Result<AppliedFinalization, ProtocolError> {
        let pool = self.pools.remove(&block.height).ok_or(ProtocolError::MissingPool(block.height))?;
        let mut applied = AppliedFinalization {
            outcome: outcome.clone(),
            pool: pool.amount,
            slashed: Tokens::ZERO,
            refunded: Tokens::ZERO,
            pool_burned: Tokens::ZERO,
            model_advanced: false,
            prices: self.prices.clone(),
        };
        let state = self.models.get_mut(&pool.model);
        match outcome {
            Outcome::Finalized { transfers, .. } => {
                let paid: Tokens = transfers.iter().map(|(_, t)| *t).sum();
                if paid != pool.amount {
                    return Err(ProtocolError::UpdateMismatch(format!("transfers {paid} differ from pool {}", pool.amount)));
                }
                if let Some(state) = state {
                    let (params, quant) = update.ok_or_else(|| ProtocolError::UpdateMismatch("missing update".into()))?;
                    let root = MerkleTree::build(&params.value_bytes(), self.leaf_size_bytes)?.root();
                    if root != block.hash_full_model32 {
                        return Err(ProtocolError::UpdateMismatch("parameters do not match hashFullModel32".into()));
                    }
                    if quant.hash() != block.hash_quant4 {
                        return Err(ProtocolError::UpdateMismatch("quantized model does not match hashQuant4".into()));
                    }
                    state.advance(params, quant, self.leaf_size_bytes)?;
                    applied.model_advanced = true;
                }
                for (id, amount) in &transfers {
                    self.ledger.credit(id, *amount);
                }
                self.prices = nudge_prices(&block.price_proposal, &self.prices);
            }
            Outcome::Rejected { slash, .. } => {
                applied.slashed = self.stakes.slash(&block.proposer, slash);
                self.ledger.burn(applied.slashed);
                if let Some(state) = state {
                    state.locked_by = None;
                }
                match self.leases.get_mut(&pool.model) {
                    Some(lease) => {
                        lease.compute_balance += pool.amount;
                        applied.refunded = pool.amount;
                    }
                    None => {
                        self.ledger.burn(pool.amount);
                        applied.pool_burned = pool.amount;
                    }
                }
            }
        }
        applied.prices = self.prices.clone();
        Ok(applied)
    }
}
