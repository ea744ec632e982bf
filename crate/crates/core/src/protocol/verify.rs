use std::collections::BTreeMap;

use serde::Serialize;

use crate::commitment::{path_len, verify, LeafProof, MerkleTree};
use crate::model::ParamVector;
use crate::quant::{apply, check_region, quantized_loss, Consistency, QuantDiff, QuantModel};
use crate::randomness::{pick_indices, Seed};
use crate::{Hash256, Height, ParticipantId};

use super::types::{Attestation, Block, ReasonCode, Verdict};
use super::{ModelState, ProtocolError, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Check {
    Pass,
    Fail,
    /// Could not be evaluated because an input was missing.
    NotRun,
}

/// The per-component results behind one attestation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct VerdictComponents {
    pub quant_hash: Check,
    pub quant_loss: Check,
    pub leaf_proof: Check,
    pub leaf_consistency: Check,
    pub availability: Check,
}

impl VerdictComponents {
    pub fn combine(quant: &QuantPhase, challenge: &ChallengePhase) -> Self {
        let availability = if quant.availability == Check::Fail || challenge.availability == Check::Fail {
            Check::Fail
        } else {
            Check::Pass
        };
        Self {
            quant_hash: quant.hash,
            quant_loss: quant.loss,
            leaf_proof: challenge.leaf_proof,
            leaf_consistency: challenge.leaf_consistency,
            availability,
        }
    }

    /// Positive iff every component passed; otherwise the first failure in
    /// the order hash, quant-loss, leaf-proof, leaf-consistency, availability.
    pub fn verdict(&self) -> (Verdict, ReasonCode) {
        let ordered = [
            (self.quant_hash, ReasonCode::QuantHashMismatch),
            (self.quant_loss, ReasonCode::QuantLossNotImproved),
            (self.leaf_proof, ReasonCode::LeafProofInvalid),
            (self.leaf_consistency, ReasonCode::LeafQuantMismatch),
            (self.availability, ReasonCode::DataUnavailable),
        ];
        if let Some(&(_, reason)) = ordered.iter().find(|(c, _)| *c == Check::Fail) {
            return (Verdict::Negative, reason);
        }
        if ordered.iter().all(|(c, _)| *c == Check::Pass) {
            (Verdict::Positive, ReasonCode::None)
        } else {
            (Verdict::Negative, ReasonCode::DataUnavailable)
        }
    }
}

/// What a verifier managed to fetch for a block's quantized model.
#[derive(Clone, Copy, Debug)]
pub enum QuantFetch<'a> {
    Missing,
    Full(&'a [u8]),
    /// A [`QuantDiff`] against the canonical `θ̃_t`.
    Diff(&'a [u8]),
}

#[derive(Clone, Debug)]
pub struct QuantPhase {
    pub hash: Check,
    pub loss: Check,
    pub availability: Check,
    /// The decoded `θ̃_{t+1}` when the hash check passed.
    pub model: Option<QuantModel>,
    pub loss_before: Option<f32>,
    pub loss_after: Option<f32>,
}

/// Recompute `hashQuant4` and the quantized-loss decrement on `D_ver`.
///
/// The hash component also requires the bytes to decode as a quantized model
/// with the task's dimension and chunking.
pub fn verify_quant_phase(block: &Block, fetched: QuantFetch<'_>, base: &ModelState, ver_rows: &[usize]) -> Result<QuantPhase, ProtocolError> {
    let unavailable = QuantPhase {
        hash: Check::NotRun,
        loss: Check::NotRun,
        availability: Check::Fail,
        model: None,
        loss_before: None,
        loss_after: None,
    };
    let decoded = match fetched {
        QuantFetch::Missing => return Ok(unavailable),
        QuantFetch::Full(bytes) => QuantModel::from_bytes(bytes).ok(),
        QuantFetch::Diff(bytes) => QuantDiff::from_bytes(bytes).ok().and_then(|d| apply(&base.quant, &d).ok()),
    };
    let task = &base.task;
    let model = decoded.filter(|q| {
        q.hash() == block.hash_quant4 && q.source_dim() == task.dim() && q.chunk_size() == task.chunk_size
    });
    let Some(model) = model else {
        return Ok(QuantPhase { hash: Check::Fail, availability: Check::Pass, ..unavailable });
    };
    let batch = task.dataset.batch(ver_rows)?;
    let before = quantized_loss(&task.mlp, &base.quant, &batch)?;
    let after = quantized_loss(&task.mlp, &model, &batch)?;
    let improved = after < before - task.quant_epsilon();
    Ok(QuantPhase {
        hash: Check::Pass,
        loss: if improved { Check::Pass } else { Check::Fail },
        availability: Check::Pass,
        model: Some(model),
        loss_before: Some(before),
        loss_after: Some(after),
    })
}

/// Distinct leaf indices to challenge; at most `num_leaves` of them.
pub fn leaf_challenge(seed: &Seed, num_leaves: usize, challenges: usize) -> Result<Vec<usize>, ProtocolError> {
    Ok(pick_indices(seed, num_leaves, challenges.min(num_leaves))?)
}

pub fn answer_challenge(tree: &MerkleTree, indices: &[usize]) -> Result<Vec<LeafProof>, ProtocolError> {
    Ok(indices.iter().map(|&i| tree.prove(i)).collect::<Result<_, _>>()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChallengePhase {
    pub leaf_proof: Check,
    pub leaf_consistency: Check,
    pub availability: Check,
}

/// Check revealed leaves against `hashFullModel32` and against the quantized
/// model. `answers[j]` must answer `indices[j]`.
pub fn verify_challenge(
    block: &Block,
    answers: Option<&[LeafProof]>,
    indices: &[usize],
    quant: Option<&QuantModel>,
    task: &Task,
    leaf_size_bytes: usize,
) -> ChallengePhase {
    let Some(answers) = answers else {
        return ChallengePhase { leaf_proof: Check::NotRun, leaf_consistency: Check::NotRun, availability: Check::Fail };
    };
    let num_leaves = task.num_leaves(leaf_size_bytes);
    let depth = path_len(num_leaves);
    let proofs_ok = answers.len() == indices.len()
        && answers.iter().zip(indices).all(|(p, &i)| {
            p.leaf_index == i as u64 && p.path.len() == depth && verify(p, &block.hash_full_model32)
        });
    if !proofs_ok {
        return ChallengePhase { leaf_proof: Check::Fail, leaf_consistency: Check::NotRun, availability: Check::Pass };
    }
    let Some(quant) = quant else {
        return ChallengePhase { leaf_proof: Check::Pass, leaf_consistency: Check::NotRun, availability: Check::Pass };
    };
    let per_leaf = Task::leaf_params(leaf_size_bytes);
    let consistent = answers.iter().all(|p| {
        let first = p.leaf_index as usize * per_leaf;
        let expected_len = per_leaf.min(task.dim().saturating_sub(first));
        match ParamVector::values_from_bytes(&p.leaf_bytes) {
            Some(values) if values.len() == expected_len => {
                matches!(check_region(&values, first, quant, &task.quant), Ok(Consistency::Pass))
            }
            _ => false,
        }
    });
    ChallengePhase {
        leaf_proof: Check::Pass,
        leaf_consistency: if consistent { Check::Pass } else { Check::Fail },
        availability: Check::Pass,
    }
}

/// Attestations gossiped for in-flight blocks. The first attestation from a
/// verifier for a height binds; later ones are refused.
#[derive(Clone, Debug, Default)]
pub struct AttestationPool {
    by_height: BTreeMap<Height, BTreeMap<ParticipantId, Attestation>>,
}

impl AttestationPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit(&mut self, attestation: Attestation) -> Result<(), ProtocolError> {
        let slot = self.by_height.entry(attestation.block_height).or_default();
        if slot.contains_key(&attestation.verifier) {
            return Err(ProtocolError::DuplicateAttestation {
                verifier: attestation.verifier,
                height: attestation.block_height,
            });
        }
        slot.insert(attestation.verifier.clone(), attestation);
        Ok(())
    }

    pub fn get(&self, height: Height) -> Vec<Attestation> {
        self.by_height.get(&height).map(|m| m.values().cloned().collect()).unwrap_or_default()
    }

    /// Remove and return the attestations for `height`, in verifier order.
    pub fn take(&mut self, height: Height) -> Vec<Attestation> {
        self.by_height.remove(&height).map(|m| m.into_values().collect()).unwrap_or_default()
    }
}

/// Digest of an attestation set, for header sealing.
pub(crate) fn attestations_digest(atts: &[Attestation]) -> Hash256 {
    let parts: Vec<Vec<u8>> = atts.iter().map(Attestation::to_bytes).collect();
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Hash256::of_parts(&refs)
}
