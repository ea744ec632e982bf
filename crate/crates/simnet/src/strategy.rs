use std::fmt;

use serde::{Deserialize, Serialize};

/// How a node behaves when it leads a block. As a verifier every node
/// checks honestly, except that non-honest nodes vouch for each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Honest,
    /// Skip training, recommit the current weights and claim an improvement.
    ForgeLoss,
    /// Train honestly but commit `k` leaves whose weights disagree with the
    /// published quantized model.
    TamperLeaves(usize),
    /// Never make the quantized model available to honest verifiers.
    WithholdQuant,
    /// Never answer the leaf challenge.
    WithholdLeafAnswer,
    /// Announce and publish bytes that do not hash to `hashQuant4`.
    PublishWrongQuant,
    /// Train honestly but always push prices up by 5%.
    LateNudgeAbuse,
}

impl Strategy {
    /// Whether blocks led by this strategy violate the protocol and must
    /// never finalize.
    pub fn is_dishonest(self) -> bool {
        match self {
            Strategy::Honest | Strategy::LateNudgeAbuse => false,
            Strategy::TamperLeaves(k) => k > 0,
            Strategy::ForgeLoss | Strategy::WithholdQuant | Strategy::WithholdLeafAnswer | Strategy::PublishWrongQuant => true,
        }
    }

    /// Member of the adversarial coalition.
    pub fn is_adversary(self) -> bool {
        self != Strategy::Honest
    }

    /// The safety catalog: one representative per attack class.
    pub fn catalog(num_leaves: usize) -> Vec<Strategy> {
        vec![
            Strategy::ForgeLoss,
            Strategy::TamperLeaves(num_leaves),
            Strategy::WithholdQuant,
            Strategy::WithholdLeafAnswer,
            Strategy::PublishWrongQuant,
        ]
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::TamperLeaves(k) => write!(f, "TamperLeaves({k})"),
            other => fmt::Debug::fmt(other, f),
        }
    }
}
