use std::collections::BTreeMap;

use serde::Serialize;

use crate::{Fraction, ParticipantId, Tokens};

use super::types::{Attestation, Block, FinalizationPolicy, StakeTable, Verdict};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Finalized {
        /// Reward payments in payment order: proposer first, then attesters
        /// by participant id.
        transfers: Vec<(ParticipantId, Tokens)>,
        positive_stake: Tokens,
        total_stake: Tokens,
    },
    Rejected {
        slash: Tokens,
        positive_stake: Tokens,
        total_stake: Tokens,
    },
}

impl Outcome {
    pub fn is_finalized(&self) -> bool {
        matches!(self, Outcome::Finalized { .. })
    }
}

/// Stake-weighted aggregation at `N + w`.
///
/// Only positive attestations for this height count, from registered stakers
/// whose tag verifies; the first one per verifier binds. The proposer's own
/// attestation counts toward the threshold like any other, since its stake is
/// in the total, but it takes no attester share of the reward. The block
/// finalizes iff the positive stake is at least `positive_threshold` of the
/// total (negative attestations simply withhold stake).
pub fn finalize(block: &Block, attestations: &[Attestation], stakes: &StakeTable, policy: &FinalizationPolicy, reward: Tokens) -> Outcome {
    let mut seen = BTreeMap::new();
    for a in attestations {
        if a.block_height != block.height || seen.contains_key(&a.verifier) {
            continue;
        }
        let Some(entry) = stakes.get(&a.verifier) else { continue };
        if !a.verify_tag(&entry.key) {
            continue;
        }
        seen.insert(a.verifier.clone(), (a.verdict, entry.stake));
    }
    let positive: Vec<(ParticipantId, Tokens)> = seen
        .into_iter()
        .filter(|(_, (v, s))| *v == Verdict::Positive && !s.is_zero())
        .map(|(id, (_, s))| (id, s))
        .collect();
    let positive_stake: Tokens = positive.iter().map(|(_, s)| *s).sum();
    let total_stake = stakes.total();
    if !total_stake.is_zero() && policy.positive_threshold.is_met_by(positive_stake, total_stake) {
        Outcome::Finalized {
            transfers: split_reward(
                reward,
                &block.proposer,
                &positive.iter().filter(|(id, _)| *id != block.proposer).cloned().collect::<Vec<_>>(),
                policy.miner_share,
            ),
            positive_stake,
            total_stake,
        }
    } else {
        Outcome::Rejected { slash: policy.slash_fraction.of(stakes.stake(&block.proposer)), positive_stake, total_stake }
    }
}

/// `floor(R × minerShare)` to the proposer, the rest pro rata by stake among
/// positive attesters (floored); rounding dust goes to the proposer. The
/// transfers always sum to `reward`.
pub fn split_reward(reward: Tokens, proposer: &ParticipantId, attesters: &[(ParticipantId, Tokens)], miner_share: Fraction) -> Vec<(ParticipantId, Tokens)> {
    let miner = miner_share.of(reward);
    let pool = reward - miner;
    let attester_stake: u128 = attesters.iter().map(|(_, s)| s.units()).sum();
    let mut shares = Vec::with_capacity(attesters.len());
    let mut paid = Tokens::ZERO;
    if attester_stake > 0 {
        for (id, stake) in attesters {
            let share = Tokens(mul_div(pool.units(), stake.units(), attester_stake));
            paid += share;
            shares.push((id.clone(), share));
        }
    }
    let mut transfers = vec![(proposer.clone(), miner + (pool - paid))];
    transfers.extend(shares);
    transfers
}

/// `floor(a × b / c)` without intermediate overflow for token-sized values.
fn mul_div(a: u128, b: u128, c: u128) -> u128 {
    match a.checked_mul(b) {
        Some(p) => p / c,
        None => {
            let (q, r) = (a / c, a % c);
            q * b + r * b / c
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::PriceProposal;
    use crate::protocol::ReasonCode;
    use crate::randomness::{SecretKey, VrfProof};
    use crate::{Hash256, ModelId};

    fn block() -> Block {
        Block {
            height: 5,
            parent_hash: Hash256::ZERO,
            proposer: "p".into(),
            model_id: ModelId(0),
            base_commitment: Hash256::ZERO,
            hash_full_model32: Hash256::ZERO,
            hash_quant4: Hash256::ZERO,
            vrf_proof: VrfProof(Hash256::ZERO),
            claimed_loss_before: 1.0,
            claimed_loss_after: 0.5,
            price_proposal: PriceProposal::default(),
        }
    }

    fn key(id: &str) -> crate::randomness::KeyMaterial {
        SecretKey::derive(9, &id.into()).registration()
    }

    fn table(entries: &[(&str, u128)]) -> StakeTable {
        let mut t = StakeTable::new();
        for (id, s) in entries {
            t.register((*id).into(), Tokens(*s), key(id));
        }
        t
    }

    fn pos(id: &str) -> Attestation {
        Attestation::sign(&key(id), id.into(), 5, Verdict::Positive, ReasonCode::None)
    }

    #[test]
    fn all_positive_finalizes() {
        let stakes = table(&[("a", 1000), ("b", 1000), ("p", 1000)]);
        let out = finalize(&block(), &[pos("a"), pos("b")], &stakes, &FinalizationPolicy::default(), Tokens(10));
        assert!(out.is_finalized());
    }

    #[test]
    fn one_unit_below_threshold_rejects() {
        // Threshold 2/3 of 3000 is 2000.
        let stakes = table(&[("a", 1999), ("p", 1001)]);
        let out = finalize(&block(), &[pos("a")], &stakes, &FinalizationPolicy::default(), Tokens(10));
        assert_eq!(out, Outcome::Rejected { slash: Tokens(100), positive_stake: Tokens(1999), total_stake: Tokens(3000) });
        let stakes = table(&[("a", 2000), ("p", 1000)]);
        assert!(finalize(&block(), &[pos("a")], &stakes, &FinalizationPolicy::default(), Tokens(10)).is_finalized());
    }

    #[test]
    fn unregistered_and_forged_attestations_do_not_count() {
        let stakes = table(&[("a", 1000), ("b", 1000), ("p", 1000)]);
        let forged = Attestation::sign(&key("mallory"), "b".into(), 5, Verdict::Positive, ReasonCode::None);
        let stranger = Attestation::sign(&key("z"), "z".into(), 5, Verdict::Positive, ReasonCode::None);
        let wrong_height = Attestation::sign(&key("b"), "b".into(), 6, Verdict::Positive, ReasonCode::None);
        let out = finalize(&block(), &[pos("a"), forged, stranger, wrong_height], &stakes, &FinalizationPolicy::default(), Tokens(10));
        assert!(matches!(out, Outcome::Rejected { positive_stake: Tokens(1000), .. }));
    }

    #[test]
    fn proposer_stake_counts_but_earns_no_attester_share() {
        let stakes = table(&[("a", 1000), ("b", 1000), ("p", 1000)]);
        let out = finalize(&block(), &[pos("a"), pos("p")], &stakes, &FinalizationPolicy::default(), Tokens(10));
        let Outcome::Finalized { transfers, positive_stake, .. } = out else { panic!("expected finalization") };
        assert_eq!(positive_stake, Tokens(2000));
        assert_eq!(transfers, vec![("p".into(), Tokens(8)), ("a".into(), Tokens(2))]);
        // Alone it is not enough.
        let out = finalize(&block(), &[pos("p")], &stakes, &FinalizationPolicy::default(), Tokens(10));
        assert!(!out.is_finalized());
    }

    #[test]
    fn reward_split_example() {
        let t = split_reward(
            Tokens(10),
            &"p".into(),
            &[("a".into(), Tokens(5)), ("b".into(), Tokens(5))],
            Fraction::new(4, 5).unwrap(),
        );
        assert_eq!(t, vec![("p".into(), Tokens(8)), ("a".into(), Tokens(1)), ("b".into(), Tokens(1))]);
    }

    #[test]
    fn reward_split_dust_goes_to_proposer() {
        let attesters = [("a".into(), Tokens(1)), ("b".into(), Tokens(1)), ("c".into(), Tokens(1))];
        let t = split_reward(Tokens(11), &"p".into(), &attesters, Fraction::new(1, 2).unwrap());
        assert_eq!(t[0], ("p".into(), Tokens(5)));
        assert_eq!(t.iter().map(|(_, v)| *v).sum::<Tokens>(), Tokens(11));
        assert_eq!(mul_div(u128::MAX / 2, 4, 8), (u128::MAX / 2) / 2);
    }
}
