//! Storage rental, model leases, and consensus-nudged prices.
//!
//! Rent is prepaid into escrow at upload and burned when the lease expires;
//! the only refund path is voiding a lease whose bytes never arrived within
//! the upload window. Anything deposited above the rent becomes the model's
//! compute balance, which pays the reward pool of each training block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Writer;
use crate::ledger::{InsufficientFunds, Ledger};
use crate::store::ContentStore;
use crate::{Fraction, Hash256, Height, ModelId, ParticipantId, Tokens};

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("deposit {offered} does not cover rent {required}")]
    InsufficientDeposit { required: Tokens, offered: Tokens },
    #[error(transparent)]
    Funds(#[from] InsufficientFunds),
    #[error("lease for {model} expired at height {rented_until} (now {now})")]
    Expired { model: ModelId, rented_until: Height, now: Height },
    #[error("{model} has compute balance {balance}, step fee is {fee}")]
    InsufficientBalance { model: ModelId, balance: Tokens, fee: Tokens },
    #[error("invalid market parameter: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceState {
    /// POGO per GB per block.
    pub giga_price: f64,
    /// POGO per training step.
    pub basic_compute_price: f64,
    pub max_nudge_fraction: f64,
}

impl Default for PriceState {
    fn default() -> Self {
        Self { giga_price: 1.0, basic_compute_price: 1.0, max_nudge_fraction: 1e-4 }
    }
}

impl PriceState {
    pub fn validate(&self) -> Result<(), MarketError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.giga_price) || !positive(self.basic_compute_price) {
            return Err(MarketError::Invalid("prices must be positive".into()));
        }
        if !(self.max_nudge_fraction.is_finite() && (0.0..1.0).contains(&self.max_nudge_fraction)) {
            return Err(MarketError::Invalid("max_nudge_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Whether `next` is a legal successor of `self` for both prices.
    pub fn within_bound(&self, next: &PriceState) -> bool {
        let ok = |p: f64, q: f64| (q - p).abs() <= self.max_nudge_fraction * p && q > 0.0;
        ok(self.giga_price, next.giga_price) && ok(self.basic_compute_price, next.basic_compute_price)
    }
}

/// A leader's requested relative change for each price (`0.0001` = +0.01%).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceProposal {
    #[serde(default)]
    pub giga: f64,
    #[serde(default)]
    pub compute: f64,
}

fn nudge_one(p: f64, delta: f64, max: f64) -> f64 {
    let delta = if delta.is_finite() { delta.clamp(-max, max) } else { 0.0 };
    let mut next = p * (1.0 + delta);
    // Walk back any rounding overshoot so the bound holds as evaluated in f64.
    while (next - p).abs() > max * p {
        next = if next > p { next.next_down() } else { next.next_up() };
    }
    next
}

/// Apply a leader's proposal, clamping each component to the per-block bound.
pub fn nudge_prices(proposal: &PriceProposal, state: &PriceState) -> PriceState {
    let m = state.max_nudge_fraction;
    PriceState {
        giga_price: nudge_one(state.giga_price, proposal.giga, m),
        basic_compute_price: nudge_one(state.basic_compute_price, proposal.compute, m),
        max_nudge_fraction: m,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketParams {
    /// Blocks after creation within which the model bytes must be available.
    pub upload_window: u64,
    /// Share of escrow burned when a lease is voided.
    pub void_penalty: Fraction,
    /// Fee multiplier for fine-tuning steps.
    pub fine_tuning_fraction: f64,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            upload_window: 2,
            void_penalty: Fraction::new(5, 100).expect("non-zero denominator"),
            fine_tuning_fraction: 0.25,
        }
    }
}

impl MarketParams {
    pub fn validate(&self) -> Result<(), MarketError> {
        if !self.void_penalty.is_within_unit() {
            return Err(MarketError::Invalid("void_penalty must be at most 1".into()));
        }
        if !(self.fine_tuning_fraction > 0.0 && self.fine_tuning_fraction <= 1.0) {
            return Err(MarketError::Invalid("fine_tuning_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelLease {
    pub model_id: ModelId,
    pub owner: ParticipantId,
    pub size_gb: f64,
    pub created_at: Height,
    /// Last height (inclusive) the lease is paid for.
    pub rented_until: Height,
    pub upload_deadline: Height,
    /// Content hash the owner must make available.
    pub model_hash: Hash256,
    pub escrow: Tokens,
    pub compute_balance: Tokens,
    pub fine_tuning_fraction: f64,
}

/// `size_gb × gigaPrice × blocks`, rounded up to a base unit.
pub fn rent_for(size_gb: f64, prices: &PriceState, blocks: u64) -> Tokens {
    Tokens::from_pogo_ceil(size_gb * prices.giga_price * blocks as f64)
}

#[derive(Clone, Debug)]
pub struct UploadRequest {
    pub model_id: ModelId,
    pub owner: ParticipantId,
    pub size_gb: f64,
    pub rented_blocks: u64,
    pub deposit: Tokens,
    pub model_hash: Hash256,
}

/// Create a lease, moving `deposit` out of the owner's wallet: the rent goes
/// to escrow and the excess to the compute balance.
pub fn upload_model(
    ledger: &mut Ledger,
    req: UploadRequest,
    prices: &PriceState,
    params: &MarketParams,
    now: Height,
) -> Result<ModelLease, MarketError> {
    if !(req.size_gb.is_finite() && req.size_gb >= 0.0) {
        return Err(MarketError::Invalid("size_gb must be finite and non-negative".into()));
    }
    let rent = rent_for(req.size_gb, prices, req.rented_blocks);
    if req.deposit < rent {
        return Err(MarketError::InsufficientDeposit { required: rent, offered: req.deposit });
    }
    ledger.debit(&req.owner, req.deposit)?;
    Ok(ModelLease {
        model_id: req.model_id,
        owner: req.owner,
        size_gb: req.size_gb,
        created_at: now,
        rented_until: now + req.rented_blocks,
        upload_deadline: now + params.upload_window,
        model_hash: req.model_hash,
        escrow: rent,
        compute_balance: req.deposit - rent,
        fine_tuning_fraction: params.fine_tuning_fraction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UploadStatus {
    /// Bytes available by the deadline.
    Alive,
    /// Window still open, bytes not yet available.
    Pending,
    /// Window closed without bytes; escrow refunded minus the penalty.
    Voided { refunded: Tokens, penalty: Tokens },
}

impl ModelLease {
    pub fn is_uploaded(&self, store: &ContentStore) -> bool {
        store.published_at(&self.model_hash).is_some_and(|h| h <= self.upload_deadline)
    }

    pub fn is_expired(&self, now: Height) -> bool {
        self.rented_until < now
    }

    pub fn step_fee(&self, prices: &PriceState, is_fine_tune: bool) -> Tokens {
        let mult = if is_fine_tune { self.fine_tuning_fraction } else { 1.0 };
        Tokens::from_pogo(prices.basic_compute_price * mult)
    }
}

/// Void a lease whose bytes were not available by its upload deadline.
/// Voiding empties the lease: the penalty share of escrow is burned, the rest
/// of escrow and the whole compute balance return to the owner.
pub fn enforce_upload_window(
    lease: &mut ModelLease,
    store: &ContentStore,
    ledger: &mut Ledger,
    params: &MarketParams,
    now: Height,
) -> UploadStatus {
    if lease.is_uploaded(store) {
        return UploadStatus::Alive;
    }
    if now <= lease.upload_deadline {
        return UploadStatus::Pending;
    }
    let penalty = params.void_penalty.of(lease.escrow);
    let refunded = lease.escrow - penalty + lease.compute_balance;
    ledger.burn(penalty);
    ledger.credit(&lease.owner, refunded);
    lease.escrow = Tokens::ZERO;
    lease.compute_balance = Tokens::ZERO;
    UploadStatus::Voided { refunded, penalty }
}

/// Extend a live lease by as many whole blocks as `tokens` pays for. All of
/// `tokens` moves into escrow. Returns the number of blocks added.
pub fn topup_rental(
    lease: &mut ModelLease,
    ledger: &mut Ledger,
    payer: &ParticipantId,
    tokens: Tokens,
    prices: &PriceState,
    now: Height,
) -> Result<u64, MarketError> {
    if lease.is_expired(now) {
        return Err(MarketError::Expired { model: lease.model_id, rented_until: lease.rented_until, now });
    }
    let per_block = rent_for(lease.size_gb, prices, 1).max(Tokens(1));
    let blocks = tokens.units() / per_block.units();
    if blocks == 0 {
        return Err(MarketError::InsufficientDeposit { required: per_block, offered: tokens });
    }
    let blocks = u64::try_from(blocks).map_err(|_| MarketError::Invalid("top-up too large".into()))?;
    ledger.debit(payer, tokens)?;
    lease.escrow += tokens;
    lease.rented_until += blocks;
    Ok(blocks)
}

/// Fork a live model: a fresh lease over the same bytes with independent
/// economics.
pub fn fork_model(
    parent: &ModelLease,
    ledger: &mut Ledger,
    req: UploadRequest,
    prices: &PriceState,
    params: &MarketParams,
    now: Height,
) -> Result<ModelLease, MarketError> {
    if parent.is_expired(now) {
        return Err(MarketError::Expired { model: parent.model_id, rented_until: parent.rented_until, now });
    }
    upload_model(ledger, UploadRequest { size_gb: parent.size_gb, ..req }, prices, params, now)
}

/// Deduct one training-step fee from the compute balance and return it as the
/// block's reward pool.
pub fn charge_training_step(lease: &mut ModelLease, prices: &PriceState, is_fine_tune: bool) -> Result<Tokens, MarketError> {
    let fee = lease.step_fee(prices, is_fine_tune);
    let rest = lease.compute_balance.checked_sub(fee).ok_or(MarketError::InsufficientBalance {
        model: lease.model_id,
        balance: lease.compute_balance,
        fee,
    })?;
    lease.compute_balance = rest;
    Ok(fee)
}

/// Drop every lease with `rented_until < now` (a lease ending exactly at `now`
/// is still alive). Escrowed rent is burned; unspent compute balance returns
/// to the owner. Returns the dropped leases in model-id order.
pub fn expire_leases(leases: &mut BTreeMap<ModelId, ModelLease>, ledger: &mut Ledger, now: Height) -> Vec<ModelLease> {
    let expired: Vec<ModelId> = leases.values().filter(|l| l.is_expired(now)).map(|l| l.model_id).collect();
    expired
        .into_iter()
        .map(|id| {
            let lease = leases.remove(&id).expect("listed above");
            ledger.burn(lease.escrow);
            ledger.credit(&lease.owner, lease.compute_balance);
            lease
        })
        .collect()
}

/// Market transactions with their canonical encodings.
#[derive(Clone, Debug, PartialEq)]
pub enum Transaction {
    UploadModel { owner: ParticipantId, size_gb: f64, rented_blocks: u64, deposit: Tokens, model_hash: Hash256 },
    TopupStorageRental { model: ModelId, payer: ParticipantId, tokens: Tokens },
    ForkModel { parent: ModelId, new_owner: ParticipantId, rented_blocks: u64, deposit: Tokens },
    FineTuneRequest { base: ModelId, owner: ParticipantId, dataset_id: Hash256, rented_blocks: u64, deposit: Tokens },
}

impl Transaction {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Transaction::UploadModel { owner, size_gb, rented_blocks, deposit, model_hash } => {
                w.u8(1).str(owner.as_str()).f64(*size_gb).u64(*rented_blocks).u128(deposit.units()).raw(model_hash.as_bytes());
            }
            Transaction::TopupStorageRental { model, payer, tokens } => {
                w.u8(2).u64(model.0 as u64).str(payer.as_str()).u128(tokens.units());
            }
            Transaction::ForkModel { parent, new_owner, rented_blocks, deposit } => {
                w.u8(3).u64(parent.0 as u64).str(new_owner.as_str()).u64(*rented_blocks).u128(deposit.units());
            }
            Transaction::FineTuneRequest { base, owner, dataset_id, rented_blocks, deposit } => {
                w.u8(4)
                    .u64(base.0 as u64)
                    .str(owner.as_str())
                    .raw(dataset_id.as_bytes())
                    .u64(*rented_blocks)
                    .u128(deposit.units());
            }
        }
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Visibility;

    fn pogo(v: f64) -> Tokens {
        Tokens::from_pogo(v)
    }

    fn setup(deposit: f64) -> (Ledger, Result<ModelLease, MarketError>) {
        let owner = ParticipantId::new("owner");
        let mut ledger = Ledger::new();
        ledger.credit(&owner, pogo(100.0));
        let prices = PriceState { giga_price: 0.5, ..PriceState::default() };
        let req = UploadRequest {
            model_id: ModelId(0),
            owner,
            size_gb: 1.0,
            rented_blocks: 10,
            deposit: pogo(deposit),
            model_hash: Hash256::of(b"model"),
        };
        let lease = upload_model(&mut ledger, req, &prices, &MarketParams::default(), 3);
        (ledger, lease)
    }

    #[test]
    fn upload_examples() {
        let (ledger, lease) = setup(5.0);
        let lease = lease.unwrap();
        assert_eq!(lease.rented_until, 13);
        assert_eq!(lease.escrow, pogo(5.0));
        assert_eq!(lease.compute_balance, Tokens::ZERO);
        assert_eq!(ledger.balance(&lease.owner), pogo(95.0));

        let (ledger, lease) = setup(4.99);
        assert!(matches!(lease, Err(MarketError::InsufficientDeposit { .. })));
        assert_eq!(ledger.balance(&ParticipantId::new("owner")), pogo(100.0));

        let (_, lease) = setup(7.0);
        assert_eq!(lease.unwrap().compute_balance, pogo(2.0));

        let (_, lease) = setup(500.0);
        assert!(matches!(lease, Err(MarketError::Funds(_))));
    }

    #[test]
    fn upload_window_rules() {
        let (mut ledger, lease) = setup(7.0);
        let mut lease = lease.unwrap();
        let params = MarketParams::default();
        let mut store = ContentStore::new();
        assert_eq!(lease.upload_deadline, 5);
        assert_eq!(enforce_upload_window(&mut lease, &store, &mut ledger, &params, 5), UploadStatus::Pending);

        let mut on_time = lease.clone();
        let mut s2 = store.clone();
        s2.publish(b"model".to_vec(), 5, Visibility::Public);
        assert_eq!(enforce_upload_window(&mut on_time, &s2, &mut ledger.clone(), &params, 9), UploadStatus::Alive);

        store.publish(b"model".to_vec(), 6, Visibility::Public);
        let before = ledger.balance(&lease.owner);
        let status = enforce_upload_window(&mut lease, &store, &mut ledger, &params, 6);
        let penalty = pogo(0.25);
        assert_eq!(status, UploadStatus::Voided { refunded: pogo(5.0) - penalty + pogo(2.0), penalty });
        assert_eq!(ledger.balance(&lease.owner), before + pogo(6.75));
        assert_eq!(ledger.burned(), penalty);
        assert!(lease.escrow.is_zero() && lease.compute_balance.is_zero());
    }

    #[test]
    fn topup_and_fork() {
        let (mut ledger, lease) = setup(7.0);
        let mut lease = lease.unwrap();
        let prices = PriceState { giga_price: 0.5, ..PriceState::default() };
        let owner = lease.owner.clone();
        assert_eq!(topup_rental(&mut lease, &mut ledger, &owner, pogo(0.5), &prices, 4).unwrap(), 1);
        assert_eq!(lease.rented_until, 14);
        assert!(topup_rental(&mut lease, &mut ledger, &owner, pogo(0.4), &prices, 4).is_err());
        assert!(matches!(
            topup_rental(&mut lease, &mut ledger, &owner, pogo(0.5), &prices, 15),
            Err(MarketError::Expired { .. })
        ));

        let bob = ParticipantId::new("bob");
        ledger.credit(&bob, pogo(10.0));
        let req = UploadRequest {
            model_id: ModelId(1),
            owner: bob.clone(),
            size_gb: 0.0,
            rented_blocks: 4,
            deposit: pogo(3.0),
            model_hash: lease.model_hash,
        };
        let fork = fork_model(&lease, &mut ledger, req.clone(), &prices, &MarketParams::default(), 10).unwrap();
        assert_eq!(fork.size_gb, lease.size_gb);
        assert_eq!(fork.escrow, pogo(2.0));
        assert_eq!(fork.compute_balance, pogo(1.0));
        assert_eq!(lease.compute_balance, pogo(2.0));
        assert!(fork_model(&lease, &mut ledger, req, &prices, &MarketParams::default(), 15).is_err());
    }

    #[test]
    fn training_fees() {
        let (_, lease) = setup(7.0);
        let mut lease = lease.unwrap();
        let prices = PriceState { basic_compute_price: 2.0, ..PriceState::default() };
        assert_eq!(lease.step_fee(&prices, false), pogo(2.0));
        assert_eq!(lease.step_fee(&prices, true), pogo(0.5));
        assert_eq!(charge_training_step(&mut lease, &prices, false).unwrap(), pogo(2.0));
        assert_eq!(lease.compute_balance, Tokens::ZERO);
        assert!(matches!(
            charge_training_step(&mut lease, &prices, true),
            Err(MarketError::InsufficientBalance { .. })
        ));
    }

    #[test]
    fn nudges_are_clamped() {
        let s = PriceState { giga_price: 100.0, basic_compute_price: 2.0, max_nudge_fraction: 1e-4 };
        let up = nudge_prices(&PriceProposal { giga: 1e-4, compute: 0.0 }, &s);
        assert!((up.giga_price - 100.01).abs() <= 1e-12 * 100.0);
        assert_eq!(up.basic_compute_price, 2.0);
        let big = nudge_prices(&PriceProposal { giga: 0.05, compute: -0.05 }, &s);
        assert!((big.giga_price - 100.01).abs() <= 1e-12 * 100.0);
        assert!((big.basic_compute_price - 2.0 * 0.9999).abs() <= 1e-12);
        assert!(s.within_bound(&big));
        let nan = nudge_prices(&PriceProposal { giga: f64::NAN, compute: 0.0 }, &s);
        assert_eq!(nan, s);
    }

    #[test]
    fn expiry_is_inclusive_at_now() {
        let (mut ledger, lease) = setup(7.0);
        let lease = lease.unwrap();
        let mut leases = BTreeMap::from([(lease.model_id, lease.clone())]);
        assert!(expire_leases(&mut leases, &mut ledger, 13).is_empty());
        let dropped = expire_leases(&mut leases, &mut ledger, 14);
        assert_eq!(dropped.len(), 1);
        assert!(leases.is_empty());
        assert_eq!(ledger.burned(), pogo(5.0));
        assert_eq!(ledger.balance(&lease.owner), pogo(95.0));
    }

    #[test]
    fn transaction_encodings_are_distinct() {
        let t1 = Transaction::TopupStorageRental { model: ModelId(1), payer: "a".into(), tokens: Tokens(5) };
        let t2 = Transaction::TopupStorageRental { model: ModelId(1), payer: "a".into(), tokens: Tokens(6) };
        assert_ne!(t1.to_bytes(), t2.to_bytes());
        assert_eq!(t1.to_bytes()[0], 2);
    }
}
