//! The deterministic event loop.
//!
//! Each height runs the same phases in a fixed order:
//!
//! 1. market transactions, owner uploads, lease expiry and upload voiding;
//! 2. settlement of the block proposed at `h − w`;
//! 3. leader election, model lottery and the proposal at `h`;
//! 4. sealing of header `h`;
//! 5. quantized-model checks for the block at `h − w/2`, whose publication
//!    deadline is now;
//! 6. the leaf challenge for that block, seeded by header `h`, followed by
//!    attestations.
//!
//! Blocks are proposed at heights `0..block_count`; the loop then drains for
//! `w` heights so every proposal settles.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use pogo_core::commitment::LeafProof;
use pogo_core::market::{fork_model, topup_rental, upload_model, PriceProposal, UploadRequest};
use pogo_core::model::Mlp;
use pogo_core::protocol::{
    answer_challenge, finalize, leaf_challenge, propose_block, train_for_block, verify_challenge, verify_quant_phase,
    assemble_proposal, Attestation, AttestationPool, BlockContext, ChainSetup, ChainState, ChallengePhase, ModelState,
    Outcome, Proposal, QuantFetch, QuantPhase, ReasonCode, StakeTable, Task, Verdict, VerdictComponents,
};
use pogo_core::quant::{diff, QuantModel};
use pogo_core::randomness::{derive_seed, pick_indices, Purpose, RandomnessError, SecretKey, SeedRng};
use pogo_core::store::{ContentStore, Visibility};
use pogo_core::ledger::Ledger;
use pogo_core::{Hash256, Height, ModelId, ParticipantId, Tokens};
use serde::Serialize;

use crate::config::{ScenarioConfig, TaskConfig, TxConfig};
use crate::report::{
    BlockOutcome, FinalState, HeightRecord, MarketEvent, ModelSummary, Settlement, SimReport, SkipReason, SlashRecord,
    Snapshot, StrategyStats, Transcript, TranscriptLine, WorkUnits,
};
use crate::strategy::Strategy;
use crate::SimError;

/// Relative price push used by [`Strategy::LateNudgeAbuse`].
const ABUSIVE_NUDGE: f64 = 0.05;

/// A run's outputs.
#[derive(Clone, Debug)]
pub struct SimRun {
    pub report: SimReport,
    pub transcript: Transcript,
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<SimRun, SimError> {
    config.validate()?;
    Simulation::new(config)?.run()
}

#[derive(Clone, Debug)]
struct Node {
    strategy: Strategy,
    secret: SecretKey,
    price_proposal: PriceProposal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Encoding {
    Full,
    Diff,
}

/// An admitted block awaiting its checks and settlement.
struct InFlight {
    proposal: Proposal,
    /// Canonical state the block builds on; it cannot change while locked.
    base: ModelState,
    ver_rows: Vec<usize>,
    strategy: Strategy,
    /// Content hash and encoding the proposer announced for its quantized
    /// model.
    announced: (Hash256, Encoding),
    answers_withheld: bool,
}

#[derive(Serialize)]
struct HeightEvents<'a> {
    market: &'a [MarketEvent],
    settlement: Option<&'a Settlement>,
}

struct Simulation<'a> {
    config: &'a ScenarioConfig,
    chain: ChainState,
    store: ContentStore,
    nodes: BTreeMap<ParticipantId, Node>,
    forced_leader: Option<ParticipantId>,
    /// Owner uploads due at a height.
    uploads: BTreeMap<Height, Vec<Vec<u8>>>,
    next_model: u32,
    inflight: BTreeMap<Height, InFlight>,
    pool: AttestationPool,
    /// Attestations gossiped since the last sealed header.
    gossip: Vec<Attestation>,
    records: Vec<HeightRecord>,
    market_events: Vec<MarketEvent>,
    conservation_violations: Vec<Height>,
    price_bound_violations: Vec<Height>,
    transcript: Transcript,
}

impl<'a> Simulation<'a> {
    fn new(config: &'a ScenarioConfig) -> Result<Self, SimError> {
        let mut ledger = Ledger::new();
        let mut stakes = StakeTable::new();
        let mut nodes = BTreeMap::new();
        for n in &config.nodes {
            let id = ParticipantId::new(&n.id);
            let secret = SecretKey::derive(config.seed, &id);
            stakes.register(id.clone(), Tokens::from_pogo(n.stake), secret.registration());
            ledger.credit(&id, Tokens::from_pogo(n.balance));
            nodes.insert(id, Node { strategy: n.strategy, secret, price_proposal: n.price_proposal });
        }
        for a in &config.accounts {
            ledger.credit(&ParticipantId::new(&a.id), Tokens::from_pogo(a.balance));
        }
        let chain = ChainState::new(ChainSetup {
            seed: config.seed,
            stakes,
            ledger,
            models: BTreeMap::new(),
            leases: BTreeMap::new(),
            prices: config.prices.clone(),
            policy: config.policy.clone(),
            market: config.market.clone(),
            alpha: config.alpha,
            leaf_size_bytes: config.leaf_size_bytes,
        })?;
        Ok(Self {
            config,
            chain,
            store: ContentStore::new(),
            nodes,
            forced_leader: config.forced_leader.as_deref().map(ParticipantId::from),
            uploads: BTreeMap::new(),
            next_model: 0,
            inflight: BTreeMap::new(),
            pool: AttestationPool::new(),
            gossip: Vec::new(),
            records: Vec::new(),
            market_events: Vec::new(),
            conservation_violations: Vec::new(),
            price_bound_violations: Vec::new(),
            transcript: Transcript::default(),
        })
    }

    fn run(mut self) -> Result<SimRun, SimError> {
        let w = self.config.policy.w;
        let offset = self.config.policy.challenge_offset();
        let last = self.config.block_count + w;
        for h in 0..last {
            let prices_before = self.chain.prices.clone();
            let events_start = self.market_events.len();

            self.market_phase(h)?;
            let settlement = if h >= w { self.settle(h - w, h)? } else { None };
            let block = if h < self.config.block_count { self.propose(h)? } else { None };

            let events = HeightEvents { market: &self.market_events[events_start..], settlement: settlement.as_ref() };
            let events_digest = Hash256::of(&serde_json::to_vec(&events).expect("events serialize"));
            let gossip = std::mem::take(&mut self.gossip);
            let header = self.chain.seal(h, block.as_ref(), &gossip, &events_digest)?;

            if h >= offset {
                self.verify(h - offset)?;
            }

            if !self.chain.conserved() {
                self.conservation_violations.push(h);
            }
            if !prices_before.within_bound(&self.chain.prices) {
                self.price_bound_violations.push(h);
            }
            if h < self.config.block_count {
                let snapshot = self.snapshot();
                self.records[h as usize].snapshot = snapshot;
            }
            self.transcript.lines.push(TranscriptLine { height: h, header, record: None });
        }
        for line in &mut self.transcript.lines {
            line.record = self.records.get(line.height as usize).cloned();
        }
        Ok(SimRun { report: self.report(), transcript: self.transcript })
    }

    fn event(&mut self, height: Height, model: Option<ModelId>, event: String) {
        self.market_events.push(MarketEvent { height, model, event });
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            stakes: self.chain.stakes.snapshot(),
            prices: self.chain.prices.clone(),
            losses: self.chain.models.values().map(|m| (m.id, m.full_loss)).collect(),
            supply_ok: self.chain.conserved(),
        }
    }

    // ---- phase 1 -------------------------------------------------------

    fn market_phase(&mut self, h: Height) -> Result<(), SimError> {
        for (i, task) in self.config.tasks.iter().enumerate() {
            if task.created_at == h {
                self.create_task(i, task, h)?;
            }
        }
        for tx in self.config.transactions.iter().filter(|t| t.height() == h) {
            self.apply_tx(tx, h)?;
        }
        for bytes in self.uploads.remove(&h).unwrap_or_default() {
            self.store.publish(bytes, h, Visibility::Public);
        }
        let hk = self.chain.housekeeping(&self.store, h);
        for id in hk.expired {
            self.event(h, Some(id), "lease expired".into());
        }
        for (id, penalty) in hk.voided {
            self.event(h, Some(id), format!("lease voided, penalty {penalty}"));
        }
        Ok(())
    }

    fn allocate_model(&mut self) -> ModelId {
        let id = ModelId(self.next_model);
        self.next_model += 1;
        id
    }

    /// Register a lease and its model. The owner's bytes arrive at `publish_at`.
    fn register_model(
        &mut self,
        h: Height,
        state: ModelState,
        lease: Result<pogo_core::market::ModelLease, pogo_core::market::MarketError>,
        publish_at: Height,
        what: &str,
    ) {
        let id = state.id;
        match lease {
            Ok(lease) => {
                self.uploads.entry(publish_at).or_default().push(state.content_bytes());
                self.chain.leases.insert(id, lease);
                self.chain.models.insert(id, state);
                self.event(h, Some(id), what.to_owned());
            }
            Err(e) => self.event(h, Some(id), format!("{what} failed: {e}")),
        }
    }

    fn create_task(&mut self, index: usize, cfg: &TaskConfig, h: Height) -> Result<(), SimError> {
        let cfg_err = |e: String| SimError::Config(format!("task {index}: {e}"));
        let mlp = Mlp::new(cfg.architecture.clone()).map_err(|e| cfg_err(e.to_string()))?;
        let dataset = Arc::new(cfg.dataset.generate().map_err(|e| cfg_err(e.to_string()))?);
        let task = Task {
            mlp,
            dataset,
            train: cfg.train.clone(),
            quant: cfg.quant.clone(),
            chunk_size: cfg.chunk_size,
            is_fine_tune: cfg.is_fine_tune,
            max_steps: cfg.max_steps,
        };
        task.validate(self.config.leaf_size_bytes).map_err(|e| cfg_err(e.to_string()))?;
        let params = task.mlp.init(&mut SeedRng::from_label(b"pogo/init", cfg.init_seed));
        let id = self.allocate_model();
        let state = ModelState::new(id, Arc::new(task), params, self.config.leaf_size_bytes)?;
        let req = UploadRequest {
            model_id: id,
            owner: ParticipantId::new(&cfg.owner),
            size_gb: cfg.size_gb.unwrap_or((state.params.dim() * 4) as f64 / 1e9),
            rented_blocks: cfg.rented_blocks,
            deposit: Tokens::from_pogo(cfg.deposit),
            model_hash: Hash256::of(&state.content_bytes()),
        };
        let lease = upload_model(&mut self.chain.ledger, req, &self.chain.prices, &self.chain.market, h);
        self.register_model(h, state, lease, h + cfg.upload_delay, "model uploaded");
        Ok(())
    }

    fn apply_tx(&mut self, tx: &TxConfig, h: Height) -> Result<(), SimError> {
        match tx {
            TxConfig::TopupStorageRental { model, payer, tokens, .. } => {
                let id = ModelId(*model);
                let chain = &mut self.chain;
                let msg = match chain.leases.get_mut(&id) {
                    Some(lease) => match topup_rental(
                        lease,
                        &mut chain.ledger,
                        &ParticipantId::new(payer),
                        Tokens::from_pogo(*tokens),
                        &chain.prices,
                        h,
                    ) {
                        Ok(blocks) => format!("rental extended by {blocks} blocks to {}", lease.rented_until),
                        Err(e) => format!("top-up failed: {e}"),
                    },
                    None => "top-up failed: no such lease".to_owned(),
                };
                self.event(h, Some(id), msg);
            }
            TxConfig::ForkModel { parent, new_owner, rented_blocks, deposit, .. } => {
                let parent_id = ModelId(*parent);
                let (Some(parent_lease), Some(parent_state)) =
                    (self.chain.leases.get(&parent_id).cloned(), self.chain.models.get(&parent_id).cloned())
                else {
                    self.event(h, Some(parent_id), "fork failed: no such model".into());
                    return Ok(());
                };
                let id = self.allocate_model();
                let mut state = parent_state;
                state.id = id;
                state.version = 0;
                state.locked_by = None;
                let req = UploadRequest {
                    model_id: id,
                    owner: ParticipantId::new(new_owner),
                    size_gb: parent_lease.size_gb,
                    rented_blocks: *rented_blocks,
                    deposit: Tokens::from_pogo(*deposit),
                    model_hash: Hash256::of(&state.content_bytes()),
                };
                let lease = fork_model(&parent_lease, &mut self.chain.ledger, req, &self.chain.prices, &self.chain.market, h);
                self.register_model(h, state, lease, h, &format!("forked from {parent_id}"));
            }
            TxConfig::FineTuneRequest { base, owner, dataset, rented_blocks, deposit, max_steps, .. } => {
                let base_id = ModelId(*base);
                let (Some(base_lease), Some(base_state)) =
                    (self.chain.leases.get(&base_id).cloned(), self.chain.models.get(&base_id).cloned())
                else {
                    self.event(h, Some(base_id), "fine-tune failed: no such model".into());
                    return Ok(());
                };
                let data = match dataset.generate() {
                    Ok(d) => d,
                    Err(e) => {
                        self.event(h, Some(base_id), format!("fine-tune failed: {e}"));
                        return Ok(());
                    }
                };
                let mut task = (*base_state.task).clone();
                task.dataset = Arc::new(data);
                task.is_fine_tune = true;
                task.max_steps = max_steps.unwrap_or(task.max_steps);
                if let Err(e) = task.validate(self.config.leaf_size_bytes) {
                    self.event(h, Some(base_id), format!("fine-tune failed: {e}"));
                    return Ok(());
                }
                let id = self.allocate_model();
                let state = ModelState::new(id, Arc::new(task), base_state.params.clone(), self.config.leaf_size_bytes)?;
                let req = UploadRequest {
                    model_id: id,
                    owner: ParticipantId::new(owner),
                    size_gb: base_lease.size_gb,
                    rented_blocks: *rented_blocks,
                    deposit: Tokens::from_pogo(*deposit),
                    model_hash: Hash256::of(&state.content_bytes()),
                };
                let lease = upload_model(&mut self.chain.ledger, req, &self.chain.prices, &self.chain.market, h);
                self.register_model(h, state, lease, h, &format!("fine-tune of {base_id}"));
            }
        }
        Ok(())
    }

    // ---- phase 2 -------------------------------------------------------

    fn settle(&mut self, b: Height, h: Height) -> Result<Option<Settlement>, SimError> {
        let Some(fl) = self.inflight.remove(&b) else { return Ok(None) };
        let block = &fl.proposal.block;
        let attestations = self.pool.take(b);
        let pool = self.chain.pools.get(&b).map(|p| p.amount).unwrap_or(Tokens::ZERO);
        let stakes_before = self.chain.stakes.snapshot();
        let proposer_stake = self.chain.stakes.stake(&block.proposer);
        let outcome = finalize(block, &attestations, &self.chain.stakes, &self.chain.policy, pool);
        let finalized = outcome.is_finalized();
        let (positive_stake, total_stake, transfers, slash_due) = match &outcome {
            Outcome::Finalized { transfers, positive_stake, total_stake } => {
                (*positive_stake, *total_stake, transfers.clone(), None)
            }
            Outcome::Rejected { slash, positive_stake, total_stake } => (*positive_stake, *total_stake, Vec::new(), Some(*slash)),
        };
        let update = finalized.then(|| (fl.proposal.committed.clone(), fl.proposal.quant.clone()));
        let applied = self.chain.apply_finalization(block, outcome, update)?;
        let settlement = Settlement {
            at: h,
            positive_stake,
            total_stake,
            pool: applied.pool,
            transfers,
            slash: slash_due.map(|due| SlashRecord {
                stake_before: proposer_stake,
                slash_due: due,
                slashed: applied.slashed,
                stake_after: self.chain.stakes.stake(&block.proposer),
            }),
            refunded: applied.refunded,
            pool_burned: applied.pool_burned,
            model_advanced: applied.model_advanced,
            canonical_loss_after: self.chain.models.get(&block.model_id).map(|m| m.full_loss),
            stakes_before,
            stakes_after: self.chain.stakes.snapshot(),
        };
        let record = &mut self.records[b as usize];
        record.outcome = if finalized { BlockOutcome::Finalized } else { BlockOutcome::Rejected };
        record.settlement = Some(settlement.clone());
        Ok(Some(settlement))
    }

    // ---- phase 3 -------------------------------------------------------

    fn propose(&mut self, h: Height) -> Result<Option<pogo_core::protocol::Block>, SimError> {
        let mut record = HeightRecord {
            height: h,
            proposer: None,
            strategy: None,
            model: None,
            outcome: BlockOutcome::Pending,
            reasons: BTreeMap::new(),
            dishonest: false,
            block_hash: None,
            claimed_loss_before: None,
            claimed_loss_after: None,
            true_loss_after: None,
            true_decrement_ok: None,
            quant_loss_before: None,
            quant_loss_after: None,
            train_steps: None,
            work: WorkUnits::default(),
            settlement: None,
            snapshot: self.snapshot(),
        };
        let result = self.try_propose(h, &mut record);
        let block = match result {
            Ok(block) => Some(block),
            Err(Skip::Reason(reason)) => {
                record.outcome = BlockOutcome::Skipped { reason };
                None
            }
            Err(Skip::Fatal(e)) => return Err(e),
        };
        self.records.push(record);
        Ok(block)
    }

    fn try_propose(&mut self, h: Height, record: &mut HeightRecord) -> Result<pogo_core::protocol::Block, Skip> {
        let leader = match self.chain.expected_leader(h, self.forced_leader.as_ref()) {
            Ok(l) => l,
            Err(pogo_core::protocol::ProtocolError::Randomness(RandomnessError::ZeroStake)) => {
                return Err(Skip::Reason(SkipReason::NoStake))
            }
            Err(e) => return Err(Skip::Fatal(e.into())),
        };
        let node = self.nodes[&leader].clone();
        record.proposer = Some(leader.clone());
        record.strategy = Some(node.strategy.to_string());
        let model_id = self.chain.pick_model(h, &self.store)?.ok_or(Skip::Reason(SkipReason::NoEligibleModel))?;
        record.model = Some(model_id);
        let base = self.chain.models[&model_id].clone();
        let ver_rows = self.chain.ver_rows(h, model_id)?;
        let ctx = BlockContext {
            height: h,
            parent_hash: self.chain.parent_hash(h)?,
            model: &base,
            minibatch_seed: self.chain.seed(h, Purpose::MiniBatch)?,
            ver_rows: &ver_rows,
            leaf_size_bytes: self.config.leaf_size_bytes,
        };
        let leader_seed = self.chain.seed(h, Purpose::Leader)?;
        let price = match node.strategy {
            Strategy::LateNudgeAbuse => PriceProposal { giga: ABUSIVE_NUDGE, compute: ABUSIVE_NUDGE },
            _ => node.price_proposal,
        };
        let task = base.task.clone();
        let batch_size = task.train.batch_size as u64;
        let full_rows = task.dataset.len() as u64;

        let (proposal, steps) = match node.strategy {
            Strategy::ForgeLoss => {
                let claimed = base.full_loss - 2.0 * task.train.epsilon;
                let p = assemble_proposal(
                    &ctx,
                    leader.clone(),
                    &node.secret,
                    &leader_seed,
                    base.params.clone(),
                    base.quant.clone(),
                    claimed,
                    price,
                )?;
                (p, 0)
            }
            Strategy::TamperLeaves(k) if k > 0 => {
                let update = train_for_block(&ctx).map_err(training_skip)?;
                let committed = tamper(&update.params, &update.quant, k, &node.secret, h, self.config.leaf_size_bytes)?;
                let steps = update.steps;
                let p = assemble_proposal(
                    &ctx,
                    leader.clone(),
                    &node.secret,
                    &leader_seed,
                    committed,
                    update.quant,
                    update.loss_after,
                    price,
                )?;
                (p, steps)
            }
            _ => {
                let (p, update) = propose_block(&ctx, leader.clone(), &node.secret, &leader_seed, price).map_err(training_skip)?;
                (p, update.steps)
            }
        };
        record.train_steps = Some(steps);
        record.work.proposer = steps as u64 * (3 * batch_size + full_rows);

        let block = proposal.block.clone();
        if let Err(e) = self.chain.validate_header(&block, h, &self.store, self.forced_leader.as_ref())? {
            return Err(Skip::Reason(SkipReason::InvalidHeader(e)));
        }
        self.chain.open_block(&block)?;

        let announced = self.publish(&node, &proposal, &base, h)?;
        let true_loss = task.mlp.loss(&proposal.committed, &task.dataset.full()).map_err(|e| Skip::Fatal(SimError::Protocol(e.into())))?;
        record.dishonest = node.strategy.is_dishonest();
        record.block_hash = Some(block.hash());
        record.claimed_loss_before = Some(block.claimed_loss_before);
        record.claimed_loss_after = Some(block.claimed_loss_after);
        record.true_loss_after = Some(true_loss);
        record.true_decrement_ok = Some(true_loss < base.full_loss - task.train.epsilon);
        self.inflight.insert(
            h,
            InFlight {
                proposal,
                base,
                ver_rows,
                strategy: node.strategy,
                announced,
                answers_withheld: node.strategy == Strategy::WithholdLeafAnswer,
            },
        );
        Ok(block)
    }

    /// Put the quantized model where the strategy wants it and return what
    /// the proposer announces.
    fn publish(&mut self, node: &Node, proposal: &Proposal, base: &ModelState, h: Height) -> Result<(Hash256, Encoding), Skip> {
        let (bytes, encoding) = if self.config.publish_diffs {
            (diff(&base.quant, &proposal.quant).map_err(to_fatal)?.to_bytes(), Encoding::Diff)
        } else {
            (proposal.quant.to_bytes(), Encoding::Full)
        };
        let announced = match node.strategy {
            Strategy::WithholdQuant => {
                let cabal: BTreeSet<ParticipantId> =
                    self.nodes.iter().filter(|(_, n)| n.strategy.is_adversary()).map(|(id, _)| id.clone()).collect();
                (self.store.publish(bytes, h, Visibility::Only(cabal)), encoding)
            }
            Strategy::PublishWrongQuant => (self.store.publish(base.quant.to_bytes(), h, Visibility::Public), Encoding::Full),
            _ => (self.store.publish(bytes, h, Visibility::Public), encoding),
        };
        Ok(announced)
    }

    // ---- phases 5 and 6 ------------------------------------------------

    fn verify(&mut self, b: Height) -> Result<(), SimError> {
        let Some(fl) = self.inflight.get(&b) else { return Ok(()) };
        let block = &fl.proposal.block;
        let task = &fl.base.task;
        let leaf = self.config.leaf_size_bytes;
        let deadline = b + self.config.policy.challenge_offset();

        let seed = self.chain.leaf_challenge_seed(b)?;
        let indices = leaf_challenge(&seed, task.num_leaves(leaf), self.config.policy.challenges_per_block)?;
        let answers: Option<Vec<LeafProof>> =
            if fl.answers_withheld { None } else { Some(answer_challenge(&fl.proposal.tree, &indices)?) };

        let proposer_colludes = fl.strategy.is_adversary();
        let verifiers: Vec<ParticipantId> = self
            .chain
            .stakes
            .stakes()
            .filter(|(id, s)| **id != block.proposer && !s.is_zero())
            .map(|(id, _)| id.clone())
            .collect();

        // Every honest verifier that fetched the same bytes computes the same
        // result, so evaluate each distinct input once.
        let mut cache: BTreeMap<bool, (QuantPhase, ChallengePhase)> = BTreeMap::new();
        let mut reasons: BTreeMap<ReasonCode, u32> = BTreeMap::new();
        let mut quant_losses = None;
        let mut honest_checks = 0u64;
        let mut attestations = Vec::with_capacity(verifiers.len());
        for v in verifiers {
            let node = &self.nodes[&v];
            let (verdict, reason) = if proposer_colludes && node.strategy.is_adversary() {
                (Verdict::Positive, ReasonCode::None)
            } else {
                honest_checks += 1;
                let bytes = self.store.fetch_before(&v, &fl.announced.0, deadline);
                let key = bytes.is_some();
                if let std::collections::btree_map::Entry::Vacant(e) = cache.entry(key) {
                    let fetched = match (bytes, fl.announced.1) {
                        (None, _) => QuantFetch::Missing,
                        (Some(b), Encoding::Full) => QuantFetch::Full(b),
                        (Some(b), Encoding::Diff) => QuantFetch::Diff(b),
                    };
                    let quant = verify_quant_phase(block, fetched, &fl.base, &fl.ver_rows)?;
                    let challenge = verify_challenge(block, answers.as_deref(), &indices, quant.model.as_ref(), task, leaf);
                    e.insert((quant, challenge));
                }
                let (quant, challenge) = &cache[&key];
                if quant.loss_before.is_some() {
                    quant_losses = Some((quant.loss_before, quant.loss_after));
                }
                VerdictComponents::combine(quant, challenge).verdict()
            };
            *reasons.entry(reason).or_default() += 1;
            let key = node.secret.registration();
            attestations.push(Attestation::sign(&key, v, b, verdict, reason));
        }
        // The proposer stands behind its own block, whatever it is.
        if let Some(node) = self.nodes.get(&block.proposer) {
            if !self.chain.stakes.stake(&block.proposer).is_zero() {
                attestations.push(Attestation::sign(&node.secret.registration(), block.proposer.clone(), b, Verdict::Positive, ReasonCode::None));
            }
        }
        for a in attestations {
            self.pool.submit(a.clone())?;
            self.gossip.push(a);
        }

        let record = &mut self.records[b as usize];
        record.reasons = reasons;
        if let Some((before, after)) = quant_losses {
            record.quant_loss_before = before;
            record.quant_loss_after = after;
        }
        if honest_checks > 0 {
            // Two quantized forward passes over D_ver plus the leaf checks.
            record.work.verifier = 2 * fl.ver_rows.len() as u64 + indices.len() as u64;
        }
        Ok(())
    }

    // ---- wrap-up -------------------------------------------------------

    fn report(&self) -> SimReport {
        let mut aggregates: BTreeMap<String, StrategyStats> = BTreeMap::new();
        for r in &self.records {
            let Some(s) = &r.strategy else { continue };
            let stats = aggregates.entry(s.clone()).or_default();
            stats.led += 1;
            match r.outcome {
                BlockOutcome::Finalized => stats.finalized += 1,
                BlockOutcome::Rejected => stats.rejected += 1,
                BlockOutcome::Skipped { .. } => stats.skipped += 1,
                BlockOutcome::Pending => {}
            }
        }
        for stats in aggregates.values_mut() {
            stats.proposed = stats.finalized + stats.rejected;
            stats.rejection_rate = (stats.proposed > 0).then(|| f64::from(stats.rejected) / f64::from(stats.proposed));
        }
        let chain = &self.chain;
        SimReport {
            config_digest: self.config.digest(),
            seed: self.config.seed,
            block_count: self.config.block_count,
            w: self.config.policy.w,
            block_time_hours: self.config.block_time_hours,
            num_leaves: chain.models.values().map(|m| (m.id, m.task.num_leaves(self.config.leaf_size_bytes))).collect(),
            records: self.records.clone(),
            aggregates,
            market_events: self.market_events.clone(),
            initial_supply: chain.initial_supply(),
            conservation_violations: self.conservation_violations.clone(),
            price_bound_violations: self.price_bound_violations.clone(),
            final_state: FinalState {
                stakes: chain.stakes.snapshot(),
                balances: chain.ledger.balances().clone(),
                burned: chain.ledger.burned(),
                supply: chain.supply(),
                prices: chain.prices.clone(),
                models: chain
                    .models
                    .values()
                    .map(|m| {
                        let summary = ModelSummary {
                            version: m.version,
                            full_loss: m.full_loss,
                            commitment: m.commitment,
                            quant_hash: m.quant_hash,
                        };
                        (m.id, summary)
                    })
                    .collect(),
            },
        }
    }
}

enum Skip {
    Reason(SkipReason),
    Fatal(SimError),
}

impl From<pogo_core::protocol::ProtocolError> for Skip {
    fn from(e: pogo_core::protocol::ProtocolError) -> Self {
        Skip::Fatal(e.into())
    }
}

fn to_fatal(e: pogo_core::quant::QuantError) -> Skip {
    Skip::Fatal(SimError::Protocol(e.into()))
}

fn training_skip(e: pogo_core::protocol::ProtocolError) -> Skip {
    match e {
        pogo_core::protocol::ProtocolError::NoBlock(_) => Skip::Reason(SkipReason::TrainingFailed),
        e => Skip::Fatal(e.into()),
    }
}

/// Shift every weight of `k` privately chosen leaves far enough that no
/// 4-bit code of the published model can explain it.
fn tamper(
    params: &pogo_core::model::ParamVector,
    quant: &QuantModel,
    k: usize,
    secret: &SecretKey,
    h: Height,
    leaf_size_bytes: usize,
) -> Result<pogo_core::model::ParamVector, Skip> {
    let per_leaf = Task::leaf_params(leaf_size_bytes);
    let leaves = pogo_core::commitment::num_leaves(params.dim() * 4, leaf_size_bytes);
    let private = Hash256::keyed(&secret.0, &[b"pogo/tamper", &h.to_le_bytes()]);
    let chosen = pick_indices(&derive_seed(&private, h, Purpose::LeafChallenge), leaves, k.min(leaves))
        .map_err(|e| Skip::Fatal(SimError::Protocol(e.into())))?;
    let max_scale = quant.scales().iter().copied().fold(0.0f32, f32::max);
    let offset = 4.0 * max_scale + 1.0;
    let mut values = params.values().to_vec();
    for leaf in chosen {
        let end = ((leaf + 1) * per_leaf).min(values.len());
        for v in &mut values[leaf * per_leaf..end] {
            *v += offset;
        }
    }
    params.with_values(values).map_err(|e| Skip::Fatal(SimError::Protocol(e.into())))
}
