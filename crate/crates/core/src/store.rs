//! In-process content-addressed store standing in for IPFS.
//!
//! Objects are keyed by the hash of their bytes and carry the height they were
//! published at plus a visibility mask, which is how withholding is modeled.
//! A fetch re-hashes before returning, so callers get matching bytes or
//! nothing.

use std::collections::{BTreeMap, BTreeSet};

use crate::{Hash256, Height, ParticipantId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Visibility {
    Public,
    Only(BTreeSet<ParticipantId>),
}

impl Visibility {
    pub fn nobody() -> Self {
        Visibility::Only(BTreeSet::new())
    }

    pub fn allows(&self, who: &ParticipantId) -> bool {
        match self {
            Visibility::Public => true,
            Visibility::Only(set) => set.contains(who),
        }
    }

    fn widen(&mut self, other: Visibility) {
        match (&mut *self, other) {
            (Visibility::Public, _) => {}
            (_, Visibility::Public) => *self = Visibility::Public,
            (Visibility::Only(a), Visibility::Only(b)) => a.extend(b),
        }
    }
}

#[derive(Clone, Debug)]
struct StoredObject {
    bytes: Vec<u8>,
    published_at: Height,
    visibility: Visibility,
}

#[derive(Clone, Debug, Default)]
pub struct ContentStore {
    objects: BTreeMap<Hash256, StoredObject>,
}

impl ContentStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store `bytes` and return their content hash. Republishing keeps the
    /// earliest publication height and widens visibility.
    pub fn publish(&mut self, bytes: Vec<u8>, height: Height, visibility: Visibility) -> Hash256 {
        let hash = Hash256::of(&bytes);
        self.objects
            .entry(hash)
            .and_modify(|o| {
                o.published_at = o.published_at.min(height);
                o.visibility.widen(visibility.clone());
            })
            .or_insert(StoredObject { bytes, published_at: height, visibility });
        hash
    }

    pub fn fetch(&self, requester: &ParticipantId, hash: &Hash256) -> Option<&[u8]> {
        let o = self.objects.get(hash)?;
        (o.visibility.allows(requester) && Hash256::of(&o.bytes) == *hash).then_some(o.bytes.as_slice())
    }

    /// Like [`fetch`](Self::fetch), but only objects published strictly before
    /// `deadline` count.
    pub fn fetch_before(&self, requester: &ParticipantId, hash: &Hash256, deadline: Height) -> Option<&[u8]> {
        self.published_at(hash)
            .filter(|&h| h < deadline)
            .and_then(|_| self.fetch(requester, hash))
    }

    pub fn published_at(&self, hash: &Hash256) -> Option<Height> {
        self.objects.get(hash).map(|o| o.published_at)
    }

    pub fn contains(&self, hash: &Hash256) -> bool {
        self.objects.contains_key(hash)
    }

    pub fn remove(&mut self, hash: &Hash256) -> bool {
        self.objects.remove(hash).is_some()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    #[cfg(test)]
    fn corrupt(&mut self, hash: &Hash256) {
        if let Some(o) = self.objects.get_mut(hash) {
            o.bytes.push(0);
        }
    }
}
