//! The safety property suite: authentic training, no post-hoc tampering,
//! data availability, and slashing with supply conservation.
//!
//! Every variant makes the base scenario's adversaries (its non-honest
//! nodes, or else its last node) play one attack, forces the first adversary
//! to lead every height so each run exercises the attack, and repeats over
//! derived seeds.

use std::collections::BTreeMap;

use pogo_core::commitment::{verify, LeafProof, MerkleTree};
use pogo_core::protocol::ReasonCode;
use pogo_core::{Fraction, Tokens};
use serde::Serialize;

use crate::detect::{par_trials, trial_seed};
use crate::report::{BlockOutcome, SimReport};
use crate::runner::run_scenario;
use crate::{ScenarioConfig, SimError, Strategy};

/// Marker for properties whose honest-majority precondition does not hold.
pub const BYZANTINE_MARKER: &str = "Byzantine majority";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PropertyStatus {
    Pass,
    Fail,
    Skipped { marker: String },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub status: PropertyStatus,
    pub runs: usize,
    /// Adversarial blocks (or Merkle cases) examined.
    pub checked: usize,
    pub failures: Vec<String>,
}

impl PropertyResult {
    fn new(name: &str, runs: usize, checked: usize, failures: Vec<String>) -> Self {
        let status = if failures.is_empty() && checked > 0 { PropertyStatus::Pass } else { PropertyStatus::Fail };
        let mut failures = failures;
        if checked == 0 {
            failures.push("no adversarial block was proposed".into());
        }
        Self { name: name.to_owned(), status, runs, checked, failures }
    }

    fn skipped(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            status: PropertyStatus::Skipped { marker: BYZANTINE_MARKER.into() },
            runs: 0,
            checked: 0,
            failures: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyReport {
    pub seeds: usize,
    pub adversary_stake_share: f64,
    pub results: Vec<PropertyResult>,
}

impl PropertyReport {
    /// No property failed. Skipped properties do not count as failures.
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.status != PropertyStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

pub const AUTHENTIC_TRAINING: &str = "authentic_training";
pub const NO_POST_HOC_TAMPERING: &str = "no_post_hoc_tampering";
pub const DATA_AVAILABILITY: &str = "data_availability";
pub const SLASHING: &str = "slashing_and_conservation";

/// Indices of the nodes that play the attack in every variant.
fn adversaries(config: &ScenarioConfig) -> Vec<usize> {
    let marked: Vec<usize> = (0..config.nodes.len()).filter(|&i| config.nodes[i].strategy != Strategy::Honest).collect();
    if marked.is_empty() {
        vec![config.nodes.len() - 1]
    } else {
        marked
    }
}

fn variant(config: &ScenarioConfig, adversaries: &[usize], strategy: Strategy) -> ScenarioConfig {
    let mut cfg = config.clone();
    for n in &mut cfg.nodes {
        n.strategy = Strategy::Honest;
    }
    for &i in adversaries {
        cfg.nodes[i].strategy = strategy;
    }
    cfg.forced_leader = Some(cfg.nodes[adversaries[0]].id.clone());
    cfg
}

fn run_seeds(config: &ScenarioConfig, seeds: usize) -> Result<Vec<SimReport>, SimError> {
    par_trials(seeds, |s| {
        let mut cfg = config.clone();
        cfg.seed = trial_seed(config.seed, s as u64);
        run_scenario(&cfg).map(|r| r.report)
    })
    .into_iter()
    .collect()
}

/// Check every adversarial block of every run with `check`, which returns
/// a failure description or `None`.
fn sweep<F>(reports: &[SimReport], label: &str, check: F) -> (usize, Vec<String>)
where
    F: Fn(&crate::report::HeightRecord) -> Option<String>,
{
    let mut checked = 0;
    let mut failures = Vec::new();
    for (s, report) in reports.iter().enumerate() {
        for r in report.records.iter().filter(|r| r.dishonest) {
            checked += 1;
            if let Some(f) = check(r) {
                failures.push(format!("{label} seed #{s} height {}: {f}", r.height));
            }
        }
    }
    (checked, failures)
}

fn rejected_with(r: &crate::report::HeightRecord, reason: ReasonCode) -> Option<String> {
    if r.outcome != BlockOutcome::Rejected {
        return Some(format!("outcome {:?}", r.outcome));
    }
    if !r.reasons.contains_key(&reason) {
        return Some(format!("no {reason} attestation, saw {:?}", r.reasons));
    }
    None
}

/// Run the four properties over `seeds` derived seeds each.
pub fn property_suite(config: &ScenarioConfig, seeds: usize) -> Result<PropertyReport, SimError> {
    config.validate()?;
    if seeds == 0 {
        return Err(SimError::Config("seeds must be at least 1".into()));
    }
    let adv = adversaries(config);
    let total: f64 = config.nodes.iter().map(|n| n.stake).sum();
    let adv_stake: f64 = adv.iter().map(|&i| config.nodes[i].stake).sum();
    let share = adv_stake / total;
    let honest_share = 1.0 - share;
    let threshold = config.policy.positive_threshold.as_f64();
    let byzantine = share > 1.0 - threshold || honest_share < threshold;

    let task = &config.tasks[0];
    let num_leaves = pogo_core::commitment::num_leaves(task.architecture.param_count() * 4, config.leaf_size_bytes);

    let mut runs: BTreeMap<Strategy, Vec<SimReport>> = BTreeMap::new();
    if !byzantine {
        for strategy in Strategy::catalog(num_leaves) {
            runs.insert(strategy, run_seeds(&variant(config, &adv, strategy), seeds)?);
        }
    }
    let mut results = Vec::new();

    // Property 1: a forged improvement is never finalized.
    if byzantine {
        results.push(PropertyResult::skipped(AUTHENTIC_TRAINING));
    } else {
        let (checked, failures) = sweep(&runs[&Strategy::ForgeLoss], "ForgeLoss", |r| {
            (r.outcome == BlockOutcome::Finalized).then(|| "forged block finalized".into())
        });
        results.push(PropertyResult::new(AUTHENTIC_TRAINING, seeds, checked, failures));
    }

    // Property 2: commitments cannot be reinterpreted after the fact.
    {
        let sweep_result = merkle_bit_flip_sweep(8, 32);
        let mut failures = sweep_result.failures.clone();
        let mut checked = sweep_result.cases;
        if byzantine {
            results.push(PropertyResult::skipped(NO_POST_HOC_TAMPERING));
        } else {
            let (c, f) = sweep(&runs[&Strategy::TamperLeaves(num_leaves)], "TamperLeaves", |r| {
                rejected_with(r, ReasonCode::LeafQuantMismatch)
            });
            checked += c;
            failures.extend(f);
            let mut res = PropertyResult::new(NO_POST_HOC_TAMPERING, seeds, checked, failures);
            if c == 0 {
                res.status = PropertyStatus::Fail;
            }
            results.push(res);
        }
    }

    // Property 3: withheld data means rejection.
    if byzantine {
        results.push(PropertyResult::skipped(DATA_AVAILABILITY));
    } else {
        let mut checked = 0;
        let mut failures = Vec::new();
        for s in [Strategy::WithholdQuant, Strategy::WithholdLeafAnswer] {
            let (c, f) = sweep(&runs[&s], &s.to_string(), |r| rejected_with(r, ReasonCode::DataUnavailable));
            checked += c;
            failures.extend(f);
        }
        results.push(PropertyResult::new(DATA_AVAILABILITY, 2 * seeds, checked, failures));
    }

    // Property 4: exact slashing and conservation across the whole catalog.
    if byzantine {
        results.push(PropertyResult::skipped(SLASHING));
    } else {
        let slash_fraction = config.policy.slash_fraction;
        let mut checked = 0;
        let mut failures = Vec::new();
        for (strategy, reports) in &runs {
            for (s, report) in reports.iter().enumerate() {
                if !report.conservation_violations.is_empty() {
                    failures.push(format!("{strategy} seed #{s}: supply drift at {:?}", report.conservation_violations));
                }
                for r in &report.records {
                    if r.dishonest && r.outcome != BlockOutcome::Rejected {
                        failures.push(format!("{strategy} seed #{s} height {}: dishonest block {:?}", r.height, r.outcome));
                    }
                    if r.outcome == BlockOutcome::Rejected {
                        checked += 1;
                        if let Some(f) = check_slash(r, slash_fraction) {
                            failures.push(format!("{strategy} seed #{s} height {}: {f}", r.height));
                        }
                    }
                }
            }
        }
        results.push(PropertyResult::new(SLASHING, runs.len() * seeds, checked, failures));
    }

    Ok(PropertyReport { seeds, adversary_stake_share: share, results })
}

/// A rejected block takes exactly `floor(stake × slash_fraction)` from its
/// proposer and touches no other stake.
pub fn check_slash(r: &crate::report::HeightRecord, slash_fraction: Fraction) -> Option<String> {
    let Some(settlement) = &r.settlement else { return Some("rejected without settlement".into()) };
    let Some(slash) = &settlement.slash else { return Some("rejected without slash record".into()) };
    let proposer = r.proposer.as_ref()?;
    let due = slash_fraction.of(slash.stake_before);
    if slash.slash_due != due || slash.slashed != due || slash.stake_after != slash.stake_before - due {
        return Some(format!("slash {slash:?}, expected {due}"));
    }
    for (id, before) in &settlement.stakes_before {
        let after = settlement.stakes_after.get(id).copied().unwrap_or(Tokens::ZERO);
        let expected = if id == proposer { *before - due } else { *before };
        if after != expected {
            return Some(format!("stake of {id} went {before} -> {after}"));
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MerkleSweep {
    pub leaves: usize,
    /// Single-bit mutations tried.
    pub cases: usize,
    /// Untampered proofs that verified.
    pub complete: usize,
    pub failures: Vec<String>,
}

/// Flip every bit of every serialized proof of a `leaves`-leaf tree, one at
/// a time. A mutated proof must fail to decode or fail to verify; every
/// original proof must verify.
pub fn merkle_bit_flip_sweep(leaves: usize, leaf_size: usize) -> MerkleSweep {
    let bytes: Vec<u8> = (0..leaves * leaf_size).map(|i| (i * 37 + 11) as u8).collect();
    let tree = MerkleTree::build(&bytes, leaf_size).expect("positive leaf size");
    let root = tree.root();
    let mut out = MerkleSweep { leaves, cases: 0, complete: 0, failures: Vec::new() };
    for i in 0..tree.num_leaves() {
        let proof = tree.prove(i).expect("index in range");
        if verify(&proof, &root) {
            out.complete += 1;
        } else {
            out.failures.push(format!("untampered proof for leaf {i} rejected"));
        }
        let encoded = proof.to_bytes();
        for bit in 0..encoded.len() * 8 {
            let mut mutated = encoded.clone();
            mutated[bit / 8] ^= 1 << (bit % 8);
            out.cases += 1;
            if let Ok(p) = LeafProof::from_bytes(&mutated) {
                if verify(&p, &root) {
                    out.failures.push(format!("leaf {i}: flipping bit {bit} still verifies"));
                }
            }
        }
    }
    out
}
