//! Machine-readable run outputs: the JSON report, its per-height CSV view,
//! and the JSONL transcript used by replay.

use std::collections::BTreeMap;

use pogo_core::market::PriceState;
use pogo_core::protocol::{HeaderError, ReasonCode};
use pogo_core::{Hash256, Height, ModelId, ParticipantId, Tokens};
use serde::Serialize;

use crate::SimError;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BlockOutcome {
    Finalized,
    Rejected,
    Skipped { reason: SkipReason },
    /// Proposed but not yet settled; never present after a full run.
    Pending,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoStake,
    NoEligibleModel,
    /// The leader could not reach the required decrements within its step
    /// budget.
    TrainingFailed,
    /// Honest nodes refused the header on receipt.
    InvalidHeader(HeaderError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlashRecord {
    pub stake_before: Tokens,
    /// `floor(stake_before × slash_fraction)`.
    pub slash_due: Tokens,
    pub slashed: Tokens,
    pub stake_after: Tokens,
}

/// What happened when a block was settled at `N + w`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settlement {
    pub at: Height,
    pub positive_stake: Tokens,
    pub total_stake: Tokens,
    pub pool: Tokens,
    pub transfers: Vec<(ParticipantId, Tokens)>,
    pub slash: Option<SlashRecord>,
    pub refunded: Tokens,
    pub pool_burned: Tokens,
    pub model_advanced: bool,
    /// Canonical full-dataset loss of the model right after settlement.
    pub canonical_loss_after: Option<f32>,
    pub stakes_before: BTreeMap<ParticipantId, Tokens>,
    pub stakes_after: BTreeMap<ParticipantId, Tokens>,
}

/// Deterministic effort estimates in sample-forward equivalents (a backward
/// pass counts as two forwards).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WorkUnits {
    pub proposer: u64,
    /// Work of one verifier re-checking the block.
    pub verifier: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub stakes: BTreeMap<ParticipantId, Tokens>,
    pub prices: PriceState,
    /// Canonical full-dataset loss per live model.
    pub losses: BTreeMap<ModelId, f32>,
    pub supply_ok: bool,
}

/// Everything about the block proposed at one height.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeightRecord {
    pub height: Height,
    pub proposer: Option<ParticipantId>,
    pub strategy: Option<String>,
    pub model: Option<ModelId>,
    pub outcome: BlockOutcome,
    /// Attestation reasons for this block (`None` for positives).
    pub reasons: BTreeMap<ReasonCode, u32>,
    /// Ground truth: the proposer cheated on this block.
    pub dishonest: bool,
    pub block_hash: Option<Hash256>,
    pub claimed_loss_before: Option<f32>,
    pub claimed_loss_after: Option<f32>,
    /// Ground truth: full-dataset loss of the committed weights.
    pub true_loss_after: Option<f32>,
    pub true_decrement_ok: Option<bool>,
    /// Quantized losses on the verification subset as honest verifiers
    /// computed them.
    pub quant_loss_before: Option<f32>,
    pub quant_loss_after: Option<f32>,
    pub train_steps: Option<usize>,
    pub work: WorkUnits,
    pub settlement: Option<Settlement>,
    /// State at the end of this height.
    pub snapshot: Snapshot,
}

impl HeightRecord {
    pub fn is_proposed(&self) -> bool {
        !matches!(self.outcome, BlockOutcome::Skipped { .. })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StrategyStats {
    pub led: u32,
    pub proposed: u32,
    pub finalized: u32,
    pub rejected: u32,
    pub skipped: u32,
    /// `rejected / proposed`.
    pub rejection_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarketEvent {
    pub height: Height,
    pub model: Option<ModelId>,
    pub event: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub version: u64,
    pub full_loss: f32,
    pub commitment: Hash256,
    pub quant_hash: Hash256,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalState {
    pub stakes: BTreeMap<ParticipantId, Tokens>,
    pub balances: BTreeMap<ParticipantId, Tokens>,
    pub burned: Tokens,
    pub supply: Tokens,
    pub prices: PriceState,
    pub models: BTreeMap<ModelId, ModelSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub config_digest: Hash256,
    pub seed: u64,
    pub block_count: u64,
    pub w: u64,
    pub block_time_hours: f64,
    pub num_leaves: BTreeMap<ModelId, usize>,
    pub records: Vec<HeightRecord>,
    pub aggregates: BTreeMap<String, StrategyStats>,
    pub market_events: Vec<MarketEvent>,
    pub initial_supply: Tokens,
    /// Processed heights where supply differed from the initial supply.
    pub conservation_violations: Vec<Height>,
    /// Heights where a price moved by more than the per-block bound.
    pub price_bound_violations: Vec<Height>,
    pub final_state: FinalState,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> Result<String, SimError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "height",
            "proposer",
            "strategy",
            "model",
            "outcome",
            "reasons",
            "claimed_loss_before",
            "claimed_loss_after",
            "true_loss_after",
            "quant_loss_before",
            "quant_loss_after",
            "slashed",
            "giga_price",
            "basic_compute_price",
            "supply_ok",
        ])
        .map_err(csv_err)?;
        let opt = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let outcome = match &r.outcome {
                BlockOutcome::Finalized => "finalized".to_owned(),
                BlockOutcome::Rejected => "rejected".to_owned(),
                BlockOutcome::Pending => "pending".to_owned(),
                BlockOutcome::Skipped { reason } => format!("skipped:{}", skip_label(reason)),
            };
            let reasons: Vec<String> = r.reasons.iter().map(|(k, v)| format!("{k}={v}")).collect();
            let slashed = r.settlement.as_ref().and_then(|s| s.slash.as_ref()).map(|s| s.slashed.units().to_string());
            w.write_record([
                r.height.to_string(),
                r.proposer.as_ref().map(ToString::to_string).unwrap_or_default(),
                r.strategy.clone().unwrap_or_default(),
                r.model.map(|m| m.to_string()).unwrap_or_default(),
                outcome,
                reasons.join(";"),
                opt(r.claimed_loss_before),
                opt(r.claimed_loss_after),
                opt(r.true_loss_after),
                opt(r.quant_loss_before),
                opt(r.quant_loss_after),
                slashed.unwrap_or_default(),
                r.snapshot.prices.giga_price.to_string(),
                r.snapshot.prices.basic_compute_price.to_string(),
                r.snapshot.supply_ok.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| SimError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn skip_label(reason: &SkipReason) -> &'static str {
    match reason {
        SkipReason::NoStake => "no_stake",
        SkipReason::NoEligibleModel => "no_eligible_model",
        SkipReason::TrainingFailed => "training_failed",
        SkipReason::InvalidHeader(_) => "invalid_header",
    }
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Io(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TranscriptLine {
    pub height: Height,
    pub header: Hash256,
    pub record: Option<HeightRecord>,
}

/// One JSON line per processed height.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
}

impl Transcript {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&serde_json::to_string(line).expect("transcript line serializes"));
            out.push('\n');
        }
        out
    }
}
