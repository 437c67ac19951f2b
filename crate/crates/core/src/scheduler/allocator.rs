use std::collections::HashMap;

use thiserror::Error;

pub type BlockId = u32;

/// Who holds a block: a request's own KV or a group's shared prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Request(usize),
    Prefix(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocError {
    #[error("out of KV blocks: requested {requested}, {free} free")]
    OutOfBlocks { requested: usize, free: usize },
    #[error("prefix {0} has no outstanding references")]
    NoReference(usize),
}

/// Fixed pool of KV blocks.
///
/// Shared prefixes are reference counted: [`KvAllocator::share_prefix`]
/// registers the number of requests reading the prefix and the prefix's
/// blocks go back to the pool when the last of them calls
/// [`KvAllocator::release_prefix_ref`].
#[derive(Debug, Clone)]
pub struct KvAllocator {
    total: usize,
    free: Vec<BlockId>,
    owned: HashMap<Owner, Vec<BlockId>>,
    prefix_refs: HashMap<usize, usize>,
    allocated: u64,
    freed: u64,
}

impl KvAllocator {
    pub fn new(total_blocks: usize) -> Self {
        Self {
            total: total_blocks,
            free: (0..total_blocks as BlockId).rev().collect(),
            owned: HashMap::new(),
            prefix_refs: HashMap::new(),
            allocated: 0,
            freed: 0,
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.total
    }

    pub fn used_blocks(&self) -> usize {
        self.total - self.free.len()
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    /// Blocks handed out over the allocator's lifetime.
    pub fn allocated_total(&self) -> u64 {
        self.allocated
    }

    /// Blocks returned over the allocator's lifetime.
    pub fn freed_total(&self) -> u64 {
        self.freed
    }

    pub fn blocks_of(&self, owner: Owner) -> &[BlockId] {
        self.owned.get(&owner).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn allocate(&mut self, owner: Owner, n: usize) -> Result<(), AllocError> {
        if n > self.free.len() {
            return Err(AllocError::OutOfBlocks {
                requested: n,
                free: self.free.len(),
            });
        }
        let at = self.free.len() - n;
        let list = self.owned.entry(owner).or_default();
        list.extend(self.free.drain(at..).rev());
        self.allocated += n as u64;
        Ok(())
    }

    /// Grows `owner`'s allocation to at least `blocks`.
    pub fn ensure(&mut self, owner: Owner, blocks: usize) -> Result<(), AllocError> {
        let have = self.blocks_of(owner).len();
        if blocks > have {
            self.allocate(owner, blocks - have)?;
        }
        Ok(())
    }

    /// Returns all of `owner`'s blocks to the pool.
    pub fn free_owner(&mut self, owner: Owner) -> usize {
        let blocks = self.owned.remove(&owner).unwrap_or_default();
        self.freed += blocks.len() as u64;
        let n = blocks.len();
        self.free.extend(blocks);
        n
    }

    pub fn share_prefix(&mut self, group: usize, refs: usize) {
        *self.prefix_refs.entry(group).or_default() += refs;
    }

    pub fn prefix_refs(&self, group: usize) -> usize {
        self.prefix_refs.get(&group).copied().unwrap_or(0)
    }

    /// Drops one reference; frees the prefix blocks when it was the last.
    /// Returns the number of blocks freed.
    pub fn release_prefix_ref(&mut self, group: usize) -> Result<usize, AllocError> {
        let refs = self
            .prefix_refs
            .get_mut(&group)
            .filter(|r| **r > 0)
            .ok_or(AllocError::NoReference(group))?;
        *refs -= 1;
        if *refs == 0 {
            self.prefix_refs.remove(&group);
            return Ok(self.free_owner(Owner::Prefix(group)));
        }
        Ok(0)
    }
}
