use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::market::PriceProposal;
use crate::randomness::{KeyMaterial, VrfProof};
use crate::{Fraction, Hash256, Height, ModelId, ParticipantId, Tokens};

use super::ProtocolError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinalizationPolicy {
    /// Blocks between proposal and finalization. The leaf challenge happens
    /// at `N + w/2` (integer division).
    pub w: u64,
    pub positive_threshold: Fraction,
    pub slash_fraction: Fraction,
    pub miner_share: Fraction,
    pub challenges_per_block: usize,
}

impl Default for FinalizationPolicy {
    fn default() -> Self {
        Self {
            w: 20,
            positive_threshold: Fraction::new(2, 3).expect("non-zero denominator"),
            slash_fraction: Fraction::new(1, 10).expect("non-zero denominator"),
            miner_share: Fraction::new(4, 5).expect("non-zero denominator"),
            challenges_per_block: 1,
        }
    }
}

impl FinalizationPolicy {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::Config(m.to_owned()));
        if self.w < 2 {
            return bad("w must be at least 2");
        }
        if self.positive_threshold.num() == 0 || !self.positive_threshold.is_within_unit() {
            return bad("positive_threshold must be in (0, 1]");
        }
        if !self.slash_fraction.is_within_unit() {
            return bad("slash_fraction must be in [0, 1]");
        }
        if !self.miner_share.is_within_unit() {
            return bad("miner_share must be in [0, 1]");
        }
        if self.challenges_per_block == 0 {
            return bad("challenges_per_block must be at least 1");
        }
        Ok(())
    }

    pub fn challenge_offset(&self) -> u64 {
        self.w / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Positive,
    Negative,
}

/// Why a verifier attested negatively. Declaration order is the fixed
/// reporting order: the first failing component wins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReasonCode {
    None,
    QuantHashMismatch,
    QuantLossNotImproved,
    LeafProofInvalid,
    LeafQuantMismatch,
    DataUnavailable,
}

impl ReasonCode {
    pub fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Block {
    pub height: Height,
    pub parent_hash: Hash256,
    pub proposer: ParticipantId,
    pub model_id: ModelId,
    /// Merkle root of the parameters this update starts from.
    pub base_commitment: Hash256,
    pub hash_full_model32: Hash256,
    pub hash_quant4: Hash256,
    pub vrf_proof: VrfProof,
    pub claimed_loss_before: f32,
    pub claimed_loss_after: f32,
    /// The leader's price nudge, applied only if this block finalizes.
    pub price_proposal: PriceProposal,
}

impl Block {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(256);
        w.u64(self.height)
            .raw(self.parent_hash.as_bytes())
            .str(self.proposer.as_str())
            .u64(u64::from(self.model_id.0))
            .raw(self.base_commitment.as_bytes())
            .raw(self.hash_full_model32.as_bytes())
            .raw(self.hash_quant4.as_bytes())
            .raw(self.vrf_proof.0.as_bytes())
            .f32(self.claimed_loss_before)
            .f32(self.claimed_loss_after)
            .f64(self.price_proposal.giga)
            .f64(self.price_proposal.compute);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let block = Block {
            height: r.u64()?,
            parent_hash: r.hash()?,
            proposer: ParticipantId(r.string()?),
            model_id: ModelId(u32::try_from(r.u64()?).map_err(|_| ProtocolError::Malformed("model id".into()))?),
            base_commitment: r.hash()?,
            hash_full_model32: r.hash()?,
            hash_quant4: r.hash()?,
            vrf_proof: VrfProof(r.hash()?),
            claimed_loss_before: r.f32()?,
            claimed_loss_after: r.f32()?,
            price_proposal: PriceProposal { giga: r.f64()?, compute: r.f64()? },
        };
        r.finish()?;
        Ok(block)
    }

    pub fn hash(&self) -> Hash256 {
        Hash256::of(&self.to_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Attestation {
    pub verifier: ParticipantId,
    pub block_height: Height,
    pub verdict: Verdict,
    pub reason: ReasonCode,
    pub auth_tag: Hash256,
}

const ATTEST_DOMAIN: &[u8] = b"pogo/attest";

pub(crate) fn attestation_message(verifier: &ParticipantId, height: Height, verdict: Verdict, reason: ReasonCode) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(verifier.as_str()).u64(height).u8(verdict as u8).u8(reason.code());
    w.finish()
}

impl Attestation {
    pub fn sign(key: &KeyMaterial, verifier: ParticipantId, block_height: Height, verdict: Verdict, reason: ReasonCode) -> Self {
        let auth_tag = key.tag(ATTEST_DOMAIN, &attestation_message(&verifier, block_height, verdict, reason));
        Self { verifier, block_height, verdict, reason, auth_tag }
    }

    pub fn verify_tag(&self, key: &KeyMaterial) -> bool {
        key.tag(ATTEST_DOMAIN, &attestation_message(&self.verifier, self.block_height, self.verdict, self.reason))
            == self.auth_tag
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = attestation_message(&self.verifier, self.block_height, self.verdict, self.reason);
        bytes.extend_from_slice(self.auth_tag.as_bytes());
        bytes
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StakeEntry {
    pub stake: Tokens,
    pub key: KeyMaterial,
}

/// Stakes and registered key material, in participant-id order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StakeTable {
    entries: BTreeMap<ParticipantId, StakeEntry>,
}

impl StakeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: ParticipantId, stake: Tokens, key: KeyMaterial) {
        self.entries.insert(id, StakeEntry { stake, key });
    }

    pub fn get(&self, id: &ParticipantId) -> Option<&StakeEntry> {
        self.entries.get(id)
    }

    pub fn stake(&self, id: &ParticipantId) -> Tokens {
        self.entries.get(id).map_or(Tokens::ZERO, |e| e.stake)
    }

    pub fn key(&self, id: &ParticipantId) -> Option<KeyMaterial> {
        self.entries.get(id).map(|e| e.key.clone())
    }

    pub fn total(&self) -> Tokens {
        self.entries.values().map(|e| e.stake).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParticipantId> {
        self.entries.keys()
    }

    pub fn stakes(&self) -> impl Iterator<Item = (&ParticipantId, Tokens)> {
        self.entries.iter().map(|(id, e)| (id, e.stake))
    }

    /// Reduce `id`'s stake by `amount` and return what was actually removed.
    pub fn slash(&mut self, id: &ParticipantId, amount: Tokens) -> Tokens {
        match self.entries.get_mut(id) {
            Some(e) => {
                let taken = amount.min(e.stake);
                e.stake -= taken;
                taken
            }
            None => Tokens::ZERO,
        }
    }

    pub fn snapshot(&self) -> BTreeMap<ParticipantId, Tokens> {
        self.stakes().map(|(id, s)| (id.clone(), s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomness::SecretKey;

    fn block() -> Block {
        Block {
            height: 7,
            parent_hash: Hash256::of(b"p"),
            proposer: "alice".into(),
            model_id: ModelId(2),
            base_commitment: Hash256::of(b"b"),
            hash_full_model32: Hash256::of(b"f"),
            hash_quant4: Hash256::of(b"q"),
            vrf_proof: VrfProof(Hash256::of(b"v")),
            claimed_loss_before: 1.5,
            claimed_loss_after: 1.25,
            price_proposal: PriceProposal { giga: 1e-4, compute: 0.0 },
        }
    }

    #[test]
    fn block_bytes_round_trip() {
        let b = block();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..8], &7u64.to_le_bytes());
        assert_eq!(Block::from_bytes(&bytes).unwrap(), b);
        assert!(Block::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut other = b.clone();
        other.claimed_loss_after = 1.0;
        assert_ne!(other.hash(), b.hash());
    }

    #[test]
    fn attestation_tags_bind_every_field() {
        let key = SecretKey::derive(1, &"v".into()).registration();
        let a = Attestation::sign(&key, "v".into(), 3, Verdict::Positive, ReasonCode::None);
        assert!(a.verify_tag(&key));
        let mut flipped = a.clone();
        flipped.verdict = Verdict::Negative;
        assert!(!flipped.verify_tag(&key));
        let other = SecretKey::derive(2, &"v".into()).registration();
        assert!(!a.verify_tag(&other));
    }

    #[test]
    fn stake_table_totals_and_slashing() {
        let mut t = StakeTable::new();
        let k = SecretKey::derive(0, &"a".into()).registration();
        t.register("a".into(), Tokens(100), k.clone());
        t.register("b".into(), Tokens(50), k);
        assert_eq!(t.total(), Tokens(150));
        assert_eq!(t.slash(&"a".into(), Tokens(10)), Tokens(10));
        assert_eq!(t.slash(&"b".into(), Tokens(80)), Tokens(50));
        assert_eq!(t.slash(&"z".into(), Tokens(1)), Tokens::ZERO);
        assert_eq!(t.total(), Tokens(90));
    }

    #[test]
    fn policy_validation() {
        let p = FinalizationPolicy::default();
        assert!(p.validate().is_ok());
        assert_eq!(p.challenge_offset(), 10);
        assert!(FinalizationPolicy { w: 1, ..p.clone() }.validate().is_err());
        assert!(FinalizationPolicy { challenges_per_block: 0, ..p.clone() }.validate().is_err());
        assert!(FinalizationPolicy { slash_fraction: Fraction::new(3, 2).unwrap(), ..p }.validate().is_err());
    }

    #[test]
    fn reason_order_is_fixed() {
        use ReasonCode::*;
        let mut v = vec![DataUnavailable, LeafQuantMismatch, QuantHashMismatch, LeafProofInvalid, QuantLossNotImproved];
        v.sort();
        assert_eq!(v, vec![QuantHashMismatch, QuantLossNotImproved, LeafProofInvalid, LeafQuantMismatch, DataUnavailable]);
    }
}
