//! Deterministic, verifiable pseudo-randomness.
//!
//! All randomness in the system flows from a [`Seed`], itself a hash of chain
//! state. Nothing reads ambient entropy. The VRF is a keyed hash under the
//! simulator's trust model (participant key material is registered on chain
//! and private to the owning node); its interface mirrors a real VRF.

use std::fmt;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Writer;
use crate::{Hash256, Height, ParticipantId, Tokens};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RandomnessError {
    #[error("cannot pick {count} distinct indices from a population of {population}")]
    Range { population: usize, count: usize },
    #[error("stake-weighted selection over zero total stake")]
    ZeroStake,
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
}

/// What a seed is used for. The tag is bound into the seed hash so distinct
/// purposes at the same height never share randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Leader,
    ModelPick,
    MiniBatch,
    VerSet,
    LeafChallenge,
}

impl Purpose {
    pub fn tag(self) -> u8 {
        match self {
            Purpose::Leader => 1,
            Purpose::ModelPick => 2,
            Purpose::MiniBatch => 3,
            Purpose::VerSet => 4,
            Purpose::LeafChallenge => 5,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub bytes: Hash256,
    pub height: Height,
    pub purpose: Purpose,
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Seed({:?}@{} {:?})", self.purpose, self.height, self.bytes)
    }
}

/// `H("pogo/seed" ‖ parent ‖ height ‖ purpose)`.
pub fn derive_seed(parent: &Hash256, height: Height, purpose: Purpose) -> Seed {
    let bytes = Hash256::of_parts(&[
        b"pogo/seed",
        parent.as_bytes(),
        &height.to_le_bytes(),
        &[purpose.tag()],
    ]);
    Seed { bytes, height, purpose }
}

impl Seed {
    /// A derived sub-seed, e.g. the batch seed for training step `index`.
    pub fn child(&self, label: &str, index: u64) -> Seed {
        let bytes = Hash256::of_parts(&[
            b"pogo/child",
            self.bytes.as_bytes(),
            label.as_bytes(),
            &index.to_le_bytes(),
        ]);
        Seed { bytes, ..*self }
    }

    pub fn rng(&self) -> SeedRng {
        SeedRng(ChaCha20Rng::from_seed(self.bytes.0))
    }
}

/// ChaCha20 stream keyed by a seed, with exact integer sampling helpers.
pub struct SeedRng(ChaCha20Rng);

impl SeedRng {
    /// Stream for setup-time randomness (dataset synthesis, initialization)
    /// that is keyed by configuration rather than chain state.
    pub fn from_label(label: &[u8], index: u64) -> Self {
        SeedRng(ChaCha20Rng::from_seed(Hash256::of_parts(&[label, &index.to_le_bytes()]).0))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `[0, bound)` by rejection; `bound` must be nonzero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % bound;
            }
        }
    }

    /// Uniform integer in `[0, bound)` for 128-bit bounds.
    pub fn below_u128(&mut self, bound: u128) -> u128 {
        assert!(bound > 0, "empty range");
        if let Ok(small) = u64::try_from(bound) {
            return u128::from(self.below(small));
        }
        let zone = u128::MAX - (u128::MAX % bound + 1) % bound;
        loop {
            let v = (u128::from(self.next_u64()) << 64) | u128::from(self.next_u64());
            if v <= zone {
                return v % bound;
            }
        }
    }

    /// Uniform in `[0, 1)` with 24 bits of precision.
    pub fn unit_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 / (1u64 << 24) as f32
    }

    /// Standard normal via Box–Muller, computed in f64.
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let u2 = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// `count` distinct indices from `0..population`, uniform without
/// replacement: the prefix of a seeded Fisher–Yates shuffle.
pub fn pick_indices(seed: &Seed, population: usize, count: usize) -> Result<Vec<usize>, RandomnessError> {
    if count == 0 || count > population {
        return Err(RandomnessError::Range { population, count });
    }
    let mut rng = seed.rng();
    let mut pool: Vec<usize> = (0..population).collect();
    for i in 0..count {
        let j = i + rng.below((population - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(count);
    Ok(pool)
}

/// Select one participant with probability `stake / total`.
///
/// `stakes` must be supplied in a canonical order (the stake table iterates
/// by participant id).
pub fn pick_stake_weighted<'a, I>(seed: &Seed, stakes: I) -> Result<ParticipantId, RandomnessError>
where
    I: IntoIterator<Item = (&'a ParticipantId, Tokens)>,
{
    let entries: Vec<_> = stakes.into_iter().filter(|(_, s)| !s.is_zero()).collect();
    let total: u128 = entries.iter().map(|(_, s)| s.units()).sum();
    if total == 0 {
        return Err(RandomnessError::ZeroStake);
    }
    let mut ticket = seed.rng().below_u128(total);
    for (id, stake) in entries {
        if ticket < stake.units() {
            return Ok(id.clone());
        }
        ticket -= stake.units();
    }
    unreachable!("ticket below total stake always lands on an entry")
}

/// Private per-node key. Never serialized into reports.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub [u8; 32]);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    /// Deterministic key for a simulated node.
    pub fn derive(scenario_seed: u64, id: &ParticipantId) -> Self {
        let h = Hash256::of_parts(&[b"pogo/node-key", &scenario_seed.to_le_bytes(), id.as_str().as_bytes()]);
        Self(h.0)
    }

    /// Key material registered in the stake table for verification.
    pub fn registration(&self) -> KeyMaterial {
        KeyMaterial(self.0)
    }
}

/// Verification material for a participant's keyed-hash proofs and tags.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial(pub [u8; 32]);

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyMaterial(..)")
    }
}

impl KeyMaterial {
    pub fn tag(&self, domain: &[u8], message: &[u8]) -> Hash256 {
        Hash256::keyed(&self.0, &[domain, message])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VrfProof(pub Hash256);

const VRF_DOMAIN: &[u8] = b"pogo/vrf";

fn vrf_message(seed: &Seed) -> Vec<u8> {
    let mut w = Writer::with_capacity(41);
    w.raw(seed.bytes.as_bytes()).u64(seed.height).u8(seed.purpose.tag());
    w.finish()
}

pub fn vrf_prove(secret: &SecretKey, seed: &Seed) -> VrfProof {
    VrfProof(secret.registration().tag(VRF_DOMAIN, &vrf_message(seed)))
}

/// Recompute the proof from `id`'s registered key material.
pub fn vrf_verify<F>(lookup: F, id: &ParticipantId, seed: &Seed, proof: &VrfProof) -> Result<bool, RandomnessError>
where
    F: FnOnce(&ParticipantId) -> Option<KeyMaterial>,
{
    let key = lookup(id).ok_or_else(|| RandomnessError::UnknownParticipant(id.clone()))?;
    Ok(key.tag(VRF_DOMAIN, &vrf_message(seed)) == proof.0)
}

/// Size of the verification subset for a dataset of `dataset_len` rows:
/// `max(1, round(alpha × |D|))`.
pub fn ver_set_size(alpha: f64, dataset_len: usize) -> usize {
    ((alpha * dataset_len as f64).round() as usize).clamp(1, dataset_len.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(n: u64, purpose: Purpose) -> Seed {
        derive_seed(&Hash256::of(b"parent"), n, purpose)
    }

    #[test]
    fn seeds_are_deterministic_and_purpose_separated() {
        assert_eq!(seed(5, Purpose::Leader), seed(5, Purpose::Leader));
        let all = [
            Purpose::Leader,
            Purpose::ModelPick,
            Purpose::MiniBatch,
            Purpose::VerSet,
            Purpose::LeafChallenge,
        ];
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                assert_ne!(seed(5, *a).bytes, seed(5, *b).bytes);
            }
        }
        assert_ne!(seed(5, Purpose::Leader).bytes, seed(6, Purpose::Leader).bytes);
    }

    #[test]
    fn seed_low_bit_is_balanced() {
        let ones = (0..10_000u64)
            .filter(|&h| seed(h, Purpose::LeafChallenge).bytes.0[31] & 1 == 1)
            .count();
        let bias = (ones as f64 / 10_000.0 - 0.5).abs();
        assert!(bias < 0.02, "low-bit bias {bias}");
    }

    #[test]
    fn pick_indices_edge_cases() {
        let s = seed(1, Purpose::MiniBatch);
        assert_eq!(pick_indices(&s, 1, 1).unwrap(), vec![0]);
        let mut perm = pick_indices(&s, 10, 10).unwrap();
        perm.sort_unstable();
        assert_eq!(perm, (0..10).collect::<Vec<_>>());
        assert_eq!(
            pick_indices(&s, 3, 4),
            Err(RandomnessError::Range { population: 3, count: 4 })
        );
        assert!(pick_indices(&s, 3, 0).is_err());
    }

    #[test]
    fn pick_indices_is_uniform_chi_square() {
        // n = 16, k = 1, 10k draws. Critical value for 15 dof at p = 0.001 is 37.70.
        let mut counts = [0u32; 16];
        let base = seed(0, Purpose::LeafChallenge);
        for i in 0..10_000 {
            counts[pick_indices(&base.child("chi", i), 16, 1).unwrap()[0]] += 1;
        }
        let expected = 10_000.0 / 16.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 37.70, "chi-square {chi2}");
    }

    #[test]
    fn stake_weighted_selection() {
        let a = ParticipantId::from("a");
        let b = ParticipantId::from("b");
        let s = seed(3, Purpose::Leader);
        assert_eq!(pick_stake_weighted(&s, [(&a, Tokens(7))]).unwrap(), a);
        for i in 0..50 {
            let pick = pick_stake_weighted(&s.child("t", i), [(&a, Tokens(1)), (&b, Tokens(0))]).unwrap();
            assert_eq!(pick, a);
        }
        assert_eq!(
            pick_stake_weighted(&s, [(&a, Tokens(0))]),
            Err(RandomnessError::ZeroStake)
        );

        let trials = 40_000;
        let hits = (0..trials)
            .filter(|&i| pick_stake_weighted(&s.child("mc", i), [(&a, Tokens(3)), (&b, Tokens(1))]).unwrap() == a)
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.75).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn vrf_round_trip_and_tamper() {
        let alice = ParticipantId::from("alice");
        let bob = ParticipantId::from("bob");
        let ka = SecretKey::derive(1, &alice);
        let kb = SecretKey::derive(1, &bob);
        let lookup = |id: &ParticipantId| match id.as_str() {
            "alice" => Some(ka.registration()),
            "bob" => Some(kb.registration()),
            _ => None,
        };
        let s = seed(9, Purpose::Leader);
        let proof = vrf_prove(&ka, &s);
        assert_eq!(vrf_verify(lookup, &alice, &s, &proof), Ok(true));
        assert_eq!(vrf_verify(lookup, &bob, &s, &proof), Ok(false));
        assert!(matches!(
            vrf_verify(lookup, &ParticipantId::from("carol"), &s, &proof),
            Err(RandomnessError::UnknownParticipant(_))
        ));
        for byte in 0..32 {
            for bit in 0..8 {
                let mut bad = proof;
                bad.0 .0[byte] ^= 1 << bit;
                assert_eq!(vrf_verify(lookup, &alice, &s, &bad), Ok(false));
            }
        }
    }

    #[test]
    fn ver_set_size_rounds_and_floors_at_one() {
        assert_eq!(ver_set_size(0.01, 10), 1);
        assert_eq!(ver_set_size(0.1, 256), 26);
        assert_eq!(ver_set_size(1.0, 7), 7);
    }
}
