//! Block lifecycle: propose at `N`, publish the quantized model before
//! `N + w/2`, answer the leaf challenge seeded by the header at `N + w/2`,
//! attest, and finalize or slash at `N + w`.

mod chain;
mod finalize;
mod propose;
mod task;
mod types;
mod verify;

use thiserror::Error;

use crate::codec::CodecError;
use crate::commitment::CommitmentError;
use crate::market::MarketError;
use crate::model::ModelError;
use crate::quant::QuantError;
use crate::randomness::RandomnessError;
use crate::{Height, ModelId, ParticipantId};

pub use chain::{AppliedFinalization, ChainSetup, ChainState, HeaderError, Housekeeping, Pool};
pub use finalize::{finalize, split_reward, Outcome};
pub use propose::{assemble_proposal, propose_block, train_for_block, BlockContext, Proposal, TrainedUpdate};
pub use task::{ver_rows, ModelState, Task};
pub use types::{Attestation, Block, FinalizationPolicy, ReasonCode, StakeEntry, StakeTable, Verdict};
pub use verify::{
    answer_challenge, leaf_challenge, verify_challenge, verify_quant_phase, AttestationPool, ChallengePhase, Check,
    QuantFetch, QuantPhase, VerdictComponents,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("header for height {requested} is not sealed yet (last sealed: {sealed:?})")]
    FutureHeight { requested: Height, sealed: Option<Height> },
    #[error("expected to seal height {expected}, got {got}")]
    OutOfOrderSeal { expected: Height, got: Height },
    #[error(transparent)]
    Header(#[from] HeaderError),
    #[error("no block: {0}")]
    NoBlock(ModelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Commitment(#[from] CommitmentError),
    #[error(transparent)]
    Randomness(#[from] RandomnessError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error("{verifier} already attested for height {height}")]
    DuplicateAttestation { verifier: ParticipantId, height: Height },
    #[error("no reward pool recorded for height {0}")]
    MissingPool(Height),
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("update does not match block: {0}")]
    UpdateMismatch(String),
}
