//! Merkle commitment over the full-precision parameter bytes.
//!
//! Leaves are fixed-size slices of the raw little-endian f32 parameter bytes
//! (the last leaf may be short). Hashing is domain-separated:
//! `leaf = H(0x00 ‖ index u64 LE ‖ bytes)` and `node = H(0x01 ‖ left ‖ right)`.
//! A level with an odd node count pairs its last node with itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, Reader, Writer};
use crate::Hash256;

const LEAF_TAG: u8 = 0x00;
const NODE_TAG: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CommitmentError {
    #[error("leaf size must be at least one byte")]
    LeafSize,
    #[error("leaf index {index} out of range for {num_leaves} leaves")]
    Range { index: usize, num_leaves: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub fn leaf_hash(index: u64, bytes: &[u8]) -> Hash256 {
    Hash256::of_parts(&[&[LEAF_TAG], &index.to_le_bytes(), bytes])
}

pub fn node_hash(left: &Hash256, right: &Hash256) -> Hash256 {
    Hash256::of_parts(&[&[NODE_TAG], left.as_bytes(), right.as_bytes()])
}

/// Public summary of a tree; `root` is what a block calls `hashFullModel32`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleCommitment {
    pub root: Hash256,
    pub num_leaves: usize,
    pub leaf_size_bytes: usize,
    pub total_bytes: usize,
}

pub fn num_leaves(total_bytes: usize, leaf_size_bytes: usize) -> usize {
    total_bytes.div_ceil(leaf_size_bytes).max(1)
}

/// Position of the sibling relative to the node on the path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeafProof {
    pub leaf_index: u64,
    pub leaf_bytes: Vec<u8>,
    pub path: Vec<(Hash256, Side)>,
}

/// A built tree with its leaves retained so proofs can be produced later.
#[derive(Clone, Debug)]
pub struct MerkleTree {
    leaves: Vec<Vec<u8>>,
    levels: Vec<Vec<Hash256>>,
    leaf_size_bytes: usize,
    total_bytes: usize,
}

impl MerkleTree {
    pub fn build(bytes: &[u8], leaf_size_bytes: usize) -> Result<Self, CommitmentError> {
        if leaf_size_bytes == 0 {
            return Err(CommitmentError::LeafSize);
        }
        let leaves: Vec<Vec<u8>> = if bytes.is_empty() {
            vec![Vec::new()]
        } else {
            bytes.chunks(leaf_size_bytes).map(<[u8]>::to_vec).collect()
        };
        Ok(Self::from_leaves(leaves, leaf_size_bytes, bytes.len()))
    }

    fn from_leaves(leaves: Vec<Vec<u8>>, leaf_size_bytes: usize, total_bytes: usize) -> Self {
        let mut level: Vec<Hash256> = leaves
            .iter()
            .enumerate()
            .map(|(i, l)| leaf_hash(i as u64, l))
            .collect();
        let mut levels = Vec::new();
        while level.len() > 1 {
            let next = level
                .chunks(2)
                .map(|pair| node_hash(&pair[0], pair.get(1).unwrap_or(&pair[0])))
                .collect();
            levels.push(std::mem::replace(&mut level, next));
        }
        levels.push(level);
        Self { leaves, levels, leaf_size_bytes, total_bytes }
    }

    pub fn root(&self) -> Hash256 {
        self.levels.last().expect("tree has a root level")[0]
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf(&self, index: usize) -> Option<&[u8]> {
        self.leaves.get(index).map(Vec::as_slice)
    }

    pub fn commitment(&self) -> MerkleCommitment {
        MerkleCommitment {
            root: self.root(),
            num_leaves: self.num_leaves(),
            leaf_size_bytes: self.leaf_size_bytes,
            total_bytes: self.total_bytes,
        }
    }

    pub fn prove(&self, index: usize) -> Result<LeafProof, CommitmentError> {
        if index >= self.num_leaves() {
            return Err(CommitmentError::Range { index, num_leaves: self.num_leaves() });
        }
        let mut path = Vec::with_capacity(self.levels.len() - 1);
        let mut pos = index;
        for level in &self.levels[..self.levels.len() - 1] {
            let (sibling, side) = if pos % 2 == 0 {
                (level.get(pos + 1).unwrap_or(&level[pos]), Side::Right)
            } else {
                (&level[pos - 1], Side::Left)
            };
            path.push((*sibling, side));
            pos /= 2;
        }
        Ok(LeafProof { leaf_index: index as u64, leaf_bytes: self.leaves[index].clone(), path })
    }
}

/// Tree depth for `num_leaves` leaves: `ceil(log2(num_leaves))`.
pub fn path_len(num_leaves: usize) -> usize {
    num_leaves.max(1).next_power_of_two().trailing_zeros() as usize
}

/// Fold the proof up to a root and compare. Sides must agree with the bits of
/// `leaf_index`, so a proof cannot be replayed at another position.
pub fn verify(proof: &LeafProof, root: &Hash256) -> bool {
    if proof.path.len() < 64 && proof.leaf_index >> proof.path.len() != 0 {
        return false;
    }
    let mut acc = leaf_hash(proof.leaf_index, &proof.leaf_bytes);
    for (level, (sibling, side)) in proof.path.iter().enumerate() {
        let bit = (proof.leaf_index >> level) & 1;
        acc = match (side, bit) {
            (Side::Right, 0) => node_hash(&acc, sibling),
            (Side::Left, 1) => node_hash(sibling, &acc),
            _ => return false,
        };
    }
    acc == *root
}

impl LeafProof {
    /// `leafIndex` u64 LE, leaf length u64 LE, leaf bytes, path length u16 LE,
    /// then `(hash, side)` entries with side `0` = left, `1` = right.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(18 + self.leaf_bytes.len() + 33 * self.path.len());
        w.u64(self.leaf_index).bytes(&self.leaf_bytes).u16(self.path.len() as u16);
        for (h, side) in &self.path {
            w.raw(h.as_bytes()).u8(matches!(side, Side::Right) as u8);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CommitmentError> {
        let mut r = Reader::new(bytes);
        let leaf_index = r.u64()?;
        let leaf_bytes = r.bytes()?.to_vec();
        let n = r.u16()? as usize;
        let mut path = Vec::with_capacity(n);
        for _ in 0..n {
            let h = r.hash()?;
            let side = match r.u8()? {
                0 => Side::Left,
                1 => Side::Right,
                b => return Err(CodecError::Invalid(format!("side byte {b}")).into()),
            };
            path.push((h, side));
        }
        r.finish()?;
        Ok(Self { leaf_index, leaf_bytes, path })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_leaf_root_is_its_leaf_hash() {
        let t = MerkleTree::build(b"hello", 8).unwrap();
        assert_eq!(t.root(), leaf_hash(0, b"hello"));
        let p = t.prove(0).unwrap();
        assert!(p.path.is_empty());
        assert!(verify(&p, &t.root()));
    }

    #[test]
    fn empty_input_is_one_empty_leaf() {
        let t = MerkleTree::build(&[], 4).unwrap();
        assert_eq!(t.num_leaves(), 1);
        assert_eq!(t.root(), leaf_hash(0, &[]));
        assert_eq!(t.commitment().total_bytes, 0);
    }

    #[test]
    fn two_leaves_hand_fold() {
        let t = MerkleTree::build(b"abcdefgh", 4).unwrap();
        assert_eq!(t.root(), node_hash(&leaf_hash(0, b"abcd"), &leaf_hash(1, b"efgh")));
    }

    #[test]
    fn four_leaf_path_for_index_two() {
        let t = MerkleTree::build(&[0, 1, 2, 3, 4, 5, 6, 7], 2).unwrap();
        let h: Vec<_> = (0..4u8).map(|i| leaf_hash(i as u64, &[2 * i, 2 * i + 1])).collect();
        let p = t.prove(2).unwrap();
        assert_eq!(p.path, vec![(h[3], Side::Right), (node_hash(&h[0], &h[1]), Side::Left)]);
    }

    #[test]
    fn odd_level_duplicates_last() {
        let t = MerkleTree::build(b"abc", 1).unwrap();
        let h: Vec<_> = [b"a", b"b", b"c"].iter().enumerate().map(|(i, b)| leaf_hash(i as u64, *b)).collect();
        let expected = node_hash(&node_hash(&h[0], &h[1]), &node_hash(&h[2], &h[2]));
        assert_eq!(t.root(), expected);
        let p = t.prove(2).unwrap();
        assert_eq!(p.path[0], (h[2], Side::Right));
        assert!(verify(&p, &expected));
    }

    #[test]
    fn out_of_range_and_zero_leaf_size() {
        let t = MerkleTree::build(b"abcd", 2).unwrap();
        assert_eq!(t.prove(2).unwrap_err(), CommitmentError::Range { index: 2, num_leaves: 2 });
        assert_eq!(MerkleTree::build(b"x", 0).unwrap_err(), CommitmentError::LeafSize);
    }

    #[test]
    fn wrong_index_or_bad_sides_rejected() {
        let t = MerkleTree::build(&[7u8; 32], 4).unwrap();
        let mut p = t.prove(5).unwrap();
        p.leaf_index = 4;
        assert!(!verify(&p, &t.root()));
        let mut p = t.prove(5).unwrap();
        p.path[1].1 = Side::Left;
        assert!(!verify(&p, &t.root()));
        let mut p = t.prove(5).unwrap();
        p.path.swap(0, 1);
        assert!(!verify(&p, &t.root()));
        let mut p = t.prove(1).unwrap();
        p.leaf_index = 1 + 8;
        assert!(!verify(&p, &t.root()));
    }

    #[test]
    fn proof_serialization_round_trips() {
        let t = MerkleTree::build(&(0..100u8).collect::<Vec<_>>(), 16).unwrap();
        let p = t.prove(6).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..8], &6u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &4u64.to_le_bytes());
        assert_eq!(LeafProof::from_bytes(&bytes).unwrap(), p);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() = 9;
        assert!(LeafProof::from_bytes(&bad).is_err());
    }

    #[test]
    fn path_len_matches_tree_depth() {
        for n in 1..40usize {
            let t = MerkleTree::build(&vec![1u8; n], 1).unwrap();
            assert_eq!(t.prove(n - 1).unwrap().path.len(), path_len(n), "n={n}");
            assert_eq!(num_leaves(n, 1), n);
        }
    }
}
