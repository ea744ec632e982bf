//! Core primitives for a proof-of-gradient-optimization chain.
//!
//! Miners take real gradient-descent steps on a small model, commit to the
//! full-precision weights with a Merkle root, publish a 4-bit quantized copy,
//! and answer random leaf challenges. Verifiers re-check the quantized loss
//! and the revealed leaves, then attest; attestations are aggregated by stake
//! to finalize or slash.
//!
//! Everything here is deterministic: every random choice is derived from a
//! [`randomness::Seed`], and every consensus-visible object has a canonical
//! little-endian byte encoding.

pub mod codec;
pub mod commitment;
pub mod costmodel;
pub mod hash;
pub mod ledger;
pub mod market;
pub mod model;
pub mod protocol;
pub mod quant;
pub mod randomness;
pub mod store;
pub mod types;

pub use hash::Hash256;
pub use types::{Fraction, Height, ModelId, ParticipantId, Tokens};
