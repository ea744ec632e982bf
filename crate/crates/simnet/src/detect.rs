//! Monte Carlo calibration of the leaf challenge against the analytic
//! catch probability.

use std::collections::BTreeMap;

use pogo_core::protocol::ReasonCode;
use pogo_core::Hash256;
use rayon::prelude::*;
use serde::Serialize;

use crate::report::BlockOutcome;
use crate::runner::run_scenario;
use crate::{ScenarioConfig, SimError, Strategy};

/// Environment variable capping worker threads for independent trials.
pub const THREADS_ENV: &str = "POGO_SIM_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionReport {
    pub k: usize,
    pub num_leaves: usize,
    pub challenges: usize,
    pub trials: usize,
    /// Trials in which the tampering block was actually proposed.
    pub proposed: usize,
    pub detected: usize,
    pub rate: f64,
    /// `1 − (1 − k/L)^m`.
    pub analytic: f64,
    /// Standard error of the empirical rate under the analytic value.
    pub std_error: f64,
    pub deviation_sigma: f64,
    pub tolerance_sigma: f64,
    pub within_tolerance: bool,
    pub reasons: BTreeMap<ReasonCode, u32>,
}

/// Seed for trial `index` of a scenario seeded with `seed`.
pub fn trial_seed(seed: u64, index: u64) -> u64 {
    let h = Hash256::of_parts(&[b"pogo/trial", &seed.to_le_bytes(), &index.to_le_bytes()]);
    u64::from_le_bytes(h.0[..8].try_into().expect("8 bytes"))
}

/// Run `f(0..n)` on the shared trial pool and return the results in index
/// order.
pub(crate) fn par_trials<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&t| t > 0);
    let work = || (0..n).into_par_iter().map(&f).collect();
    match threads {
        Some(t) => rayon::ThreadPoolBuilder::new().num_threads(t).build().expect("thread pool").install(work),
        None => work(),
    }
}

/// Each trial runs the scenario with a fresh seed, the first `TamperLeaves`
/// node forced to lead height 0 with `k` tampered leaves, and only the heights
/// needed to settle that block.
pub fn detection_rate(config: &ScenarioConfig, k: usize, trials: usize, tolerance_sigma: f64) -> Result<DetectionReport, SimError> {
    if trials == 0 {
        return Err(SimError::Config("trials must be at least 1".into()));
    }
    let tamperer = config
        .nodes
        .iter()
        .position(|n| matches!(n.strategy, Strategy::TamperLeaves(_)))
        .ok_or_else(|| SimError::Config("no node uses the tamper_leaves strategy".into()))?;
    let task = config.tasks.first().ok_or_else(|| SimError::Config("no task".into()))?;
    let num_leaves = pogo_core::commitment::num_leaves(task.architecture.param_count() * 4, config.leaf_size_bytes);
    let mut base = config.clone();
    base.nodes[tamperer].strategy = Strategy::TamperLeaves(k);
    base.forced_leader = Some(base.nodes[tamperer].id.clone());
    base.block_count = base.policy.w;
    base.validate()?;

    let outcomes = par_trials(trials, |t| {
        let mut cfg = base.clone();
        cfg.seed = trial_seed(config.seed, t as u64);
        run_scenario(&cfg).map(|run| {
            let r = &run.report.records[0];
            (r.outcome.clone(), r.reasons.clone())
        })
    });
    let mut proposed = 0;
    let mut detected = 0;
    let mut reasons: BTreeMap<ReasonCode, u32> = BTreeMap::new();
    for o in outcomes {
        let (outcome, rs) = o?;
        match outcome {
            BlockOutcome::Finalized => proposed += 1,
            BlockOutcome::Rejected => {
                proposed += 1;
                detected += 1;
            }
            _ => continue,
        }
        for (r, c) in rs {
            *reasons.entry(r).or_default() += c;
        }
    }
    let m = config.policy.challenges_per_block;
    let analytic = 1.0 - (1.0 - k as f64 / num_leaves as f64).powi(m.min(num_leaves) as i32);
    let rate = if proposed == 0 { 0.0 } else { detected as f64 / proposed as f64 };
    let std_error = if proposed == 0 { 0.0 } else { (analytic * (1.0 - analytic) / proposed as f64).sqrt() };
    let gap = (rate - analytic).abs();
    let deviation_sigma = if std_error > 0.0 { gap / std_error } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(DetectionReport {
        k,
        num_leaves,
        challenges: m,
        trials,
        proposed,
        detected,
        rate,
        analytic,
        std_error,
        deviation_sigma,
        tolerance_sigma,
        within_tolerance: proposed > 0 && deviation_sigma <= tolerance_sigma,
        reasons,
    })
}
