//! Scenario files: TOML with defaults for everything but the roster and
//! the tasks, plus dotted-path overrides such as `policy.w=4`.

use std::collections::BTreeSet;
use std::path::Path;

use pogo_core::market::{MarketParams, PriceProposal, PriceState};
use pogo_core::model::{Architecture, DatasetSpec, TrainPolicy};
use pogo_core::protocol::FinalizationPolicy;
use pogo_core::quant::QuantPolicy;
use pogo_core::Hash256;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::strategy::Strategy;
use crate::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Heights at which blocks may be proposed. The run then drains for `w`
    /// more heights so every proposal is settled.
    pub block_count: u64,
    /// Recorded for cost reports only.
    #[serde(default = "default_block_time")]
    pub block_time_hours: f64,
    #[serde(default = "default_leaf_size")]
    pub leaf_size_bytes: usize,
    /// Fraction of the dataset in each verification subset.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Every node elects this participant instead of drawing a leader.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_leader: Option<String>,
    /// Publish quantized models as diffs against the canonical one.
    #[serde(default)]
    pub publish_diffs: bool,
    #[serde(default)]
    pub policy: FinalizationPolicy,
    #[serde(default)]
    pub prices: PriceState,
    #[serde(default)]
    pub market: MarketParams,
    pub nodes: Vec<NodeConfig>,
    /// Wallets that own models but do not stake.
    #[serde(default)]
    pub accounts: Vec<AccountConfig>,
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub transactions: Vec<TxConfig>,
}

fn default_block_time() -> f64 {
    1.0
}

fn default_leaf_size() -> usize {
    256
}

fn default_alpha() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    /// Stake in POGO.
    pub stake: f64,
    /// Liquid balance in POGO.
    #[serde(default)]
    pub balance: f64,
    #[serde(default)]
    pub strategy: Strategy,
    /// Price nudge this node proposes when it leads an honest block.
    #[serde(default)]
    pub price_proposal: PriceProposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountConfig {
    pub id: String,
    pub balance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub architecture: Architecture,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainPolicy,
    #[serde(default)]
    pub quant: QuantPolicy,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub is_fine_tune: bool,
    /// Seed for the initial parameters.
    #[serde(default)]
    pub init_seed: u64,
    pub owner: String,
    /// Height of the upload transaction.
    #[serde(default)]
    pub created_at: u64,
    /// Blocks after creation at which the owner makes the bytes available;
    /// beyond the upload window the lease is voided.
    #[serde(default)]
    pub upload_delay: u64,
    pub rented_blocks: u64,
    /// POGO moved from the owner: rent first, the rest pays training fees.
    pub deposit: f64,
    /// Declared size; defaults to the actual f32 parameter bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_gb: Option<f64>,
}

fn default_chunk() -> usize {
    64
}

fn default_max_steps() -> usize {
    200
}

/// Market transactions scheduled at a height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TxConfig {
    TopupStorageRental { height: u64, model: u32, payer: String, tokens: f64 },
    ForkModel { height: u64, parent: u32, new_owner: String, rented_blocks: u64, deposit: f64 },
    FineTuneRequest {
        height: u64,
        base: u32,
        owner: String,
        dataset: DatasetSpec,
        rented_blocks: u64,
        deposit: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_steps: Option<usize>,
    },
}

impl TxConfig {
    pub fn height(&self) -> u64 {
        match self {
            TxConfig::TopupStorageRental { height, .. }
            | TxConfig::ForkModel { height, .. }
            | TxConfig::FineTuneRequest { height, .. } => *height,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        Self::from_toml_with(text, &[])
    }

    /// Parse, apply `key=value` overrides, and validate.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, SimError> {
        let mut value: Value = text.parse::<toml::Table>().map(Value::Table).map_err(|e| SimError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: ScenarioConfig = value.try_into().map_err(|e: toml::de::Error| SimError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Hash of the canonical JSON form; identifies a scenario in reports.
    pub fn digest(&self) -> Hash256 {
        Hash256::of(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        self.policy.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.prices.validate().map_err(|e| SimError::Config(e.to_string()))?;
        self.market.validate().map_err(|e| SimError::Config(e.to_string()))?;
        if self.block_count < self.policy.w {
            return bad(format!("block_count {} must be at least w = {}", self.block_count, self.policy.w));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} must be in (0, 1]", self.alpha));
        }
        if !(self.block_time_hours.is_finite() && self.block_time_hours > 0.0) {
            return bad("block_time_hours must be positive".into());
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if n.id.is_empty() || !ids.insert(n.id.as_str()) {
                return bad(format!("node id {:?} is empty or duplicated", n.id));
            }
            if !(n.stake.is_finite() && n.stake >= 0.0 && n.balance.is_finite() && n.balance >= 0.0) {
                return bad(format!("node {}: stake and balance must be finite and non-negative", n.id));
            }
        }
        if !self.nodes.iter().any(|n| n.stake > 0.0) {
            return bad("at least one node needs positive stake".into());
        }
        for a in &self.accounts {
            if a.id.is_empty() || !ids.insert(a.id.as_str()) {
                return bad(format!("account id {:?} is empty or duplicated", a.id));
            }
            if !(a.balance.is_finite() && a.balance >= 0.0) {
                return bad(format!("account {}: balance must be finite and non-negative", a.id));
            }
        }
        if let Some(l) = &self.forced_leader {
            if !self.nodes.iter().any(|n| &n.id == l && n.stake > 0.0) {
                return bad(format!("forced leader {l} is not a staked node"));
            }
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.architecture.validate().map_err(|e| SimError::Config(format!("task {i}: {e}")))?;
            if !ids.contains(t.owner.as_str()) {
                return bad(format!("task {i}: owner {} is not a node or account", t.owner));
            }
            if !(t.deposit.is_finite() && t.deposit >= 0.0) {
                return bad(format!("task {i}: deposit must be non-negative"));
            }
            if t.size_gb.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
                return bad(format!("task {i}: size_gb must be non-negative"));
            }
            if t.architecture.inputs != t.dataset.features || t.architecture.outputs != t.dataset.outputs {
                return bad(format!("task {i}: architecture widths do not match the dataset"));
            }
            let dim = t.architecture.param_count();
            let leaves = pogo_core::commitment::num_leaves(dim * 4, self.leaf_size_bytes);
            for n in &self.nodes {
                if let Strategy::TamperLeaves(k) = n.strategy {
                    if k > leaves {
                        return bad(format!("node {}: tamper_leaves {k} exceeds {leaves} leaves of task {i}", n.id));
                    }
                }
            }
        }
        for tx in &self.transactions {
            let who = match tx {
                TxConfig::TopupStorageRental { payer, .. } => payer,
                TxConfig::ForkModel { new_owner, .. } => new_owner,
                TxConfig::FineTuneRequest { owner, .. } => owner,
            };
            if !ids.contains(who.as_str()) {
                return bad(format!("transaction at height {}: {who} is not a node or account", tx.height()));
            }
        }
        Ok(())
    }
}

/// Set `path` (dots separate keys, integers index arrays) to `raw`, parsed as
/// a TOML value or, failing that, taken as a string. Intermediate tables are
/// created as needed; unknown keys are caught when the result is parsed.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), SimError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| SimError::Config(format!("override {assignment:?} is not key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(SimError::Config(format!("override {assignment:?} has an empty key")));
    }
    let value = parse_literal(raw.trim());
    let keys: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        cur = match cur {
            Value::Table(t) => {
                if last {
                    t.insert((*key).to_owned(), value);
                    return Ok(());
                }
                t.entry((*key).to_owned()).or_insert_with(|| Value::Table(toml::Table::new()))
            }
            Value::Array(a) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| SimError::Config(format!("override {path}: {key:?} is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| SimError::Config(format!("override {path}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(SimError::Config(format!("override {path}: {key:?} is below a scalar"))),
        };
    }
    unreachable!("loop returns on the last key")
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_owned()))
}
