//! Content-addressed block cache with least-recently-used eviction, as used
//! by engines that discover shared prefixes at runtime.

use std::collections::{BTreeMap, HashMap};
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::workload::TokenId;

/// Hash of a block's tokens chained with its predecessor's hash, so equal
/// hashes imply equal prefixes up to and including the block.
pub fn chain_hash(prev: u64, block: &[TokenId]) -> u64 {
    let mut h = DefaultHasher::new();
    prev.hash(&mut h);
    block.hash(&mut h);
    h.finish()
}

/// Chained hashes of every full block of `tokens`.
pub fn block_hashes(tokens: &[TokenId], block_size: usize) -> Vec<u64> {
    let mut prev = 0u64;
    tokens
        .chunks_exact(block_size)
        .map(|b| {
            prev = chain_hash(prev, b);
            prev
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    refs: usize,
    last_used: u64,
}

/// Blocks referenced by running requests are pinned; only unreferenced
/// blocks are evicted, oldest use first.
#[derive(Debug, Clone)]
pub struct LruBlockCache {
    capacity: usize,
    entries: HashMap<u64, Entry>,
    /// Unreferenced entries keyed by last use.
    evictable: BTreeMap<u64, u64>,
    clock: u64,
    hits: u64,
    evictions: u64,
}

impl LruBlockCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: HashMap::new(),
            evictable: BTreeMap::new(),
            clock: 0,
            hits: 0,
            evictions: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn contains(&self, hash: u64) -> bool {
        self.entries.contains_key(&hash)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn pin(&mut self, hash: u64) -> bool {
        let now = self.tick();
        let Some(e) = self.entries.get_mut(&hash) else {
            return false;
        };
        if e.refs == 0 {
            self.evictable.remove(&e.last_used);
        }
        e.refs += 1;
        e.last_used = now;
        true
    }

    /// Number of leading hashes present in the cache. Every hit is pinned
    /// and must later be released.
    pub fn lookup_prefix(&mut self, hashes: &[u64]) -> usize {
        let mut n = 0;
        for &h in hashes {
            if !self.pin(h) {
                break;
            }
            n += 1;
        }
        self.hits += n as u64;
        n
    }

    /// Inserts (or re-pins) a block just computed by a running request.
    /// Returns `false` when the cache is full of pinned blocks, in which case
    /// nothing is stored and nothing needs releasing.
    pub fn insert(&mut self, hash: u64) -> bool {
        if self.pin(hash) {
            return true;
        }
        if self.capacity == 0 {
            return false;
        }
        if self.entries.len() >= self.capacity {
            let Some((_, victim)) = self.evictable.pop_first() else {
                return false;
            };
            self.entries.remove(&victim);
            self.evictions += 1;
        }
        let now = self.tick();
        self.entries.insert(hash, Entry { refs: 1, last_used: now });
        true
    }

    pub fn release(&mut self, hash: u64) {
        let now = self.tick();
        if let Some(e) = self.entries.get_mut(&hash) {
            debug_assert!(e.refs > 0);
            e.refs -= 1;
            if e.refs == 0 {
                e.last_used = now;
                self.evictable.insert(now, hash);
            }
        }
    }
}
