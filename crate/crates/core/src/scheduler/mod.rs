//! Iteration-level simulation of continuous batching with chunked prefill.
//!
//! Three policies share one engine:
//!
//! * `batchllm` schedules whole prefix-sharing groups, optionally reordered
//!   so groups with fewer prefill tokens go first, and admits prefill chunks
//!   against a KV memory threshold with no limit on request count.
//! * `fcfs_cap` schedules raw requests in arrival order with a per-batch cap
//!   on the number of distinct requests and no prefix sharing.
//! * `fcfs_cap_lru` adds a content-hashed LRU block cache: full prompt blocks
//!   found in the cache at admission are skipped.
//!
//! Each iteration fills a token batch of at most `chunk_size` tokens from
//! three queues, in order: one decode token per decoding request, distinct
//! prompt chunks of admitted requests, then shared prefix chunks of the next
//! groups. A group's members become eligible only in the iteration after its
//! prefix finished.
//!
//! Memory admission is reservation based. A request reserves its worst case
//! footprint (remaining prompt plus all `output_len` decode tokens) when its
//! first chunk is admitted, and a group reserves its prefix plus one member
//! "slot" sized for its largest member. The slot is only usable by that
//! group's members, so a started group can always make progress and the
//! simulation never needs swapping or preemption.

mod allocator;
mod lru;

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use allocator::{AllocError, BlockId, KvAllocator, Owner};
pub use lru::{block_hashes, chain_hash, LruBlockCache};

use crate::prefix_tree::{groups_fingerprint, PrefixSharingGroup};
use crate::workload::{TokenId, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    #[serde(rename = "batchllm")]
    BatchLlm,
    #[serde(rename = "fcfs_cap")]
    FcfsCap,
    #[serde(rename = "fcfs_cap_lru")]
    FcfsCapLru,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::BatchLlm, Policy::FcfsCap, Policy::FcfsCapLru];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::BatchLlm => "batchllm",
            Policy::FcfsCap => "fcfs_cap",
            Policy::FcfsCapLru => "fcfs_cap_lru",
        }
    }

    pub fn is_fcfs(self) -> bool {
        !matches!(self, Policy::BatchLlm)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| SimError::InvalidConfig(format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Token budget per iteration.
    pub chunk_size: usize,
    /// Tokens per KV block.
    pub block_size: usize,
    pub total_blocks: usize,
    /// Admission cap in blocks; `None` means `total_blocks`.
    pub mem_threshold: Option<usize>,
    pub policy: Policy,
    /// Max distinct requests per batch (fcfs policies only).
    pub request_cap: usize,
    /// LRU cache capacity in blocks (`fcfs_cap_lru` only).
    pub lru_blocks: usize,
    /// Order groups by ascending prefill tokens (`batchllm` only).
    pub reorder: bool,
    /// Limit on groups whose prefix may start in one iteration.
    pub max_new_groups_per_iter: Option<usize>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            chunk_size: 2048,
            block_size: 16,
            total_blocks: 32768,
            mem_threshold: None,
            policy: Policy::BatchLlm,
            request_cap: 256,
            lru_blocks: 8192,
            reorder: true,
            max_new_groups_per_iter: None,
        }
    }
}

impl SchedulerConfig {
    pub fn with_policy(policy: Policy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    pub fn threshold(&self) -> usize {
        self.mem_threshold.unwrap_or(self.total_blocks)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_owned()));
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1");
        }
        if self.block_size == 0 {
            return bad("block_size must be at least 1");
        }
        if self.total_blocks == 0 {
            return bad("total_blocks must be at least 1");
        }
        if !(1..=self.total_blocks).contains(&self.threshold()) {
            return bad("mem_threshold must be within 1..=total_blocks");
        }
        if self.request_cap == 0 {
            return bad("request_cap must be at least 1");
        }
        if self.max_new_groups_per_iter == Some(0) {
            return bad("max_new_groups_per_iter must be at least 1");
        }
        Ok(())
    }

    fn blocks_for(&self, tokens: usize) -> usize {
        tokens.div_ceil(self.block_size)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scheduler config: {0}")]
    InvalidConfig(String),
    #[error("policy {policy} expects {expected} as input")]
    InputMismatch {
        policy: Policy,
        expected: &'static str,
    },
    #[error("request `{id}` needs {needed} blocks but the memory threshold is {threshold}")]
    Unschedulable {
        id: String,
        needed: usize,
        threshold: usize,
    },
    #[error("no request can make progress at iteration {0}")]
    Stalled(usize),
    #[error("trace: {0}")]
    Trace(String),
}

/// Simulation input: prefix-sharing groups for `batchllm`, a raw workload
/// (arrival order) for the fcfs policies.
#[derive(Debug, Clone, Copy)]
pub enum SimInput<'a> {
    Groups(&'a [PrefixSharingGroup]),
    Workload(&'a Workload),
}

/// Group indices sorted by `1 / (prefix + sum of suffixes)` descending,
/// i.e. by total prefill tokens ascending. Stable on ties.
pub fn order_groups(groups: &[PrefixSharingGroup]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| groups[i].processed_tokens());
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Group not started.
    Waiting,
    /// Group started; this request is not yet admitted.
    PrefillPrefixPending,
    Prefilling,
    Decoding,
    Done,
}

#[derive(Debug, Clone)]
pub struct RequestState {
    pub id: String,
    /// Position of the request's group in scheduling order.
    pub group: usize,
    pub phase: Phase,
    pub prompt_len: usize,
    /// Prompt tokens whose KV is available, including the shared prefix and
    /// cache hits.
    pub prefill_done: usize,
    pub decode_done: u32,
    pub output_len: u32,
    /// Prompt tokens served from the LRU cache.
    pub cached_tokens: usize,
    shared_len: usize,
    footprint: usize,
    in_slot: bool,
    tokens: Option<Vec<TokenId>>,
    hashes: Vec<u64>,
    cache_refs: Vec<u64>,
}

impl RequestState {
    fn own_tokens(&self) -> usize {
        self.prefill_done - self.shared_len + self.decode_done as usize
    }
}

#[derive(Debug, Clone)]
struct GroupState {
    prefix_len: usize,
    prefix_done: usize,
    prefix_footprint: usize,
    members: Vec<usize>,
    next_unadmitted: usize,
    prefix_complete: bool,
    slot: usize,
    slot_held: bool,
    slot_occupied: bool,
    live: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    PrefixChunk,
    DistinctChunk,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryOwner {
    Request(usize),
    GroupPrefix(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub owner: EntryOwner,
    pub kind: EntryKind,
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenBatch {
    pub iteration: usize,
    pub entries: Vec<BatchEntry>,
}

impl TokenBatch {
    pub fn total_tokens(&self) -> usize {
        self.entries.iter().map(|e| e.tokens).sum()
    }

    pub fn decode_tokens(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Decode)
            .map(|e| e.tokens)
            .sum()
    }

    pub fn prefill_tokens(&self) -> usize {
        self.total_tokens() - self.decode_tokens()
    }

    /// Distinct requests with an entry in this batch.
    pub fn request_count(&self) -> usize {
        let set: BTreeSet<usize> = self
            .entries
            .iter()
            .filter_map(|e| match e.owner {
                EntryOwner::Request(r) => Some(r),
                EntryOwner::GroupPrefix(_) => None,
            })
            .collect();
        set.len()
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub total_tokens: usize,
    pub decode_tokens: usize,
    pub prefill_tokens: usize,
    pub blocks_used: usize,
    pub active_requests: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub policy: Policy,
    pub chunk_size: usize,
    pub n_requests: usize,
    pub workload_fingerprint: String,
    pub n_processed_prefill_tokens: u64,
    pub n_logical_prefill_tokens: u64,
    pub iterations: Vec<IterationTrace>,
}

impl SimulationTrace {
    pub fn iteration_count(&self) -> usize {
        self.iterations.len()
    }

    pub fn total_decode_tokens(&self) -> u64 {
        self.iterations.iter().map(|r| r.decode_tokens as u64).sum()
    }

    pub fn total_prefill_tokens(&self) -> u64 {
        self.iterations.iter().map(|r| r.prefill_tokens as u64).sum()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| SimError::Trace(format!("{}: {e}", path.display())))?;
        self.write_csv_to(BufWriter::new(file))
    }

    /// Header: `iteration,total_tokens,decode_tokens,prefill_tokens,blocks_used,active_requests`.
    pub fn write_csv_to(&self, out: impl Write) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.iterations {
            w.serialize(row).map_err(|e| SimError::Trace(e.to_string()))?;
        }
        if self.iterations.is_empty() {
            w.write_record([
                "iteration",
                "total_tokens",
                "decode_tokens",
                "prefill_tokens",
                "blocks_used",
                "active_requests",
            ])
            .map_err(|e| SimError::Trace(e.to_string()))?;
        }
        w.flush().map_err(|e| SimError::Trace(e.to_string()))
    }
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<IterationTrace>, SimError> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::Trace(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| SimError::Trace(format!("{}: row {}: {e}", path.display(), i + 1))))
        .collect()
}

/// Step-by-step simulator. [`Simulator::run`] drives it to completion.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SchedulerConfig,
    groups: Vec<GroupState>,
    requests: Vec<RequestState>,
    alloc: KvAllocator,
    cache: Option<LruBlockCache>,
    committed: usize,
    iteration: usize,
    next_group: usize,
    decode_queue: Vec<usize>,
    prefilling: BTreeSet<usize>,
    pending_groups: BTreeSet<usize>,
    prefix_in_progress: BTreeSet<usize>,
    done: usize,
    n_processed: u64,
    n_logical: u64,
    fingerprint: String,
    trace: Vec<IterationTrace>,
    last_batch: TokenBatch,
}

impl Simulator {
    pub fn new(input: SimInput<'_>, config: SchedulerConfig) -> Result<Self, SimError> {
        config.validate()?;
        let keep_tokens = config.policy == Policy::FcfsCapLru;
        let mut groups = Vec::new();
        let mut requests = Vec::new();
        let fingerprint;

        match (config.policy, input) {
            (Policy::BatchLlm, SimInput::Groups(gs)) => {
                fingerprint = groups_fingerprint(gs);
                let order = if config.reorder {
                    order_groups(gs)
                } else {
                    (0..gs.len()).collect()
                };
                for gi in order {
                    let g = &gs[gi];
                    let pos = groups.len();
                    let mut members = Vec::with_capacity(g.members.len());
                    for m in &g.members {
                        members.push(requests.len());
                        requests.push(new_request(
                            &config,
                            m.id.clone(),
                            pos,
                            g.prefix.len(),
                            g.prefix.len() + m.suffix.len(),
                            m.output_len,
                            None,
                        ));
                    }
                    groups.push(new_group(&config, g.prefix.len(), members, &requests));
                }
            }
            (Policy::BatchLlm, SimInput::Workload(_)) => {
                return Err(SimError::InputMismatch {
                    policy: config.policy,
                    expected: "prefix-sharing groups",
                })
            }
            (_, SimInput::Workload(w)) => {
                fingerprint = w.fingerprint();
                for r in &w.requests {
                    let pos = groups.len();
                    let idx = requests.len();
                    requests.push(new_request(
                        &config,
                        r.id.clone(),
                        pos,
                        0,
                        r.tokens.len(),
                        r.output_len,
                        keep_tokens.then(|| r.tokens.clone()),
                    ));
                    groups.push(new_group(&config, 0, vec![idx], &requests));
                }
            }
            (_, SimInput::Groups(_)) => {
                return Err(SimError::InputMismatch {
                    policy: config.policy,
                    expected: "a raw workload",
                })
            }
        }

        let threshold = config.threshold();
        for g in &groups {
            if g.prefix_footprint + g.slot > threshold {
                let worst = g
                    .members
                    .iter()
                    .max_by_key(|&&r| requests[r].footprint)
                    .expect("groups are non-empty");
                return Err(SimError::Unschedulable {
                    id: requests[*worst].id.clone(),
                    needed: g.prefix_footprint + g.slot,
                    threshold,
                });
            }
        }

        let n_logical = requests.iter().map(|r| r.prompt_len as u64).sum();
        Ok(Self {
            alloc: KvAllocator::new(config.total_blocks),
            cache: (config.policy == Policy::FcfsCapLru).then(|| LruBlockCache::new(config.lru_blocks)),
            config,
            groups,
            requests,
            committed: 0,
            iteration: 0,
            next_group: 0,
            decode_queue: Vec::new(),
            prefilling: BTreeSet::new(),
            pending_groups: BTreeSet::new(),
            prefix_in_progress: BTreeSet::new(),
            done: 0,
            n_processed: 0,
            n_logical,
            fingerprint,
            trace: Vec::new(),
            last_batch: TokenBatch::default(),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    /// Requests in scheduling order.
    pub fn requests(&self) -> &[RequestState] {
        &self.requests
    }

    pub fn allocator(&self) -> &KvAllocator {
        &self.alloc
    }

    pub fn cache(&self) -> Option<&LruBlockCache> {
        self.cache.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.done == self.requests.len()
    }

    pub fn last_batch(&self) -> &TokenBatch {
        &self.last_batch
    }

    pub fn trace_rows(&self) -> &[IterationTrace] {
        &self.trace
    }

    /// KV blocks currently owned by request `idx` (excluding shared prefix).
    pub fn kv_blocks(&self, idx: usize) -> &[BlockId] {
        self.alloc.blocks_of(Owner::Request(idx))
    }

    /// Whether group `pos` (scheduling order) has finished its prefix.
    pub fn prefix_complete(&self, pos: usize) -> bool {
        self.groups[pos].prefix_complete
    }

    pub fn n_processed_prefill_tokens(&self) -> u64 {
        self.n_processed
    }

    fn cap(&self) -> usize {
        if self.config.policy.is_fcfs() {
            self.config.request_cap
        } else {
            usize::MAX
        }
    }

    /// Fills the next token batch. Admission decisions (memory reservation,
    /// cache lookups) are applied to the state here; token progress is
    /// applied by [`Simulator::execute`].
    pub fn form_token_batch(&mut self) -> Result<TokenBatch, SimError> {
        let mut b = BatchBuilder {
            budget: self.config.chunk_size,
            cap: self.cap(),
            requests: 0,
            batch: TokenBatch {
                iteration: self.iteration,
                entries: Vec::new(),
            },
        };

        // decoding queue
        for &r in &self.decode_queue {
            if !b.can_add_request() {
                break;
            }
            b.push(EntryOwner::Request(r), EntryKind::Decode, 1);
        }

        // distinct prompt queue: admitted requests first, then new members of
        // groups whose prefix is done
        let prefilling: Vec<usize> = self.prefilling.iter().copied().collect();
        for r in prefilling {
            if !b.can_add_request() {
                break;
            }
            let rem = self.requests[r].prompt_len - self.requests[r].prefill_done;
            let n = rem.min(b.budget);
            b.push(EntryOwner::Request(r), EntryKind::DistinctChunk, n);
        }
        let pending: Vec<usize> = self.pending_groups.iter().copied().collect();
        let mut blocked = false;
        for g in pending {
            if !self.admit_members(g, &mut b) {
                blocked = true;
                break;
            }
        }

        // common prefix queue
        let in_progress: Vec<usize> = self.prefix_in_progress.iter().copied().collect();
        for g in in_progress {
            if b.budget == 0 {
                break;
            }
            let n = self.prefix_chunk(g, &b);
            if n > 0 {
                b.push(EntryOwner::GroupPrefix(g), EntryKind::PrefixChunk, n);
            }
        }
        let mut started = 0;
        while !blocked && self.next_group < self.groups.len() && b.budget > 0 {
            if self.config.max_new_groups_per_iter.is_some_and(|m| started >= m) {
                break;
            }
            let g = self.next_group;
            let empty_prefix = self.groups[g].prefix_len == 0;
            let n = if empty_prefix {
                if !b.can_add_request() {
                    break;
                }
                0
            } else {
                match self.prefix_chunk(g, &b) {
                    0 => break,
                    n => n,
                }
            };
            let need = self.groups[g].prefix_footprint + self.groups[g].slot;
            if self.committed + need > self.config.threshold() {
                break;
            }
            self.start_group(g);
            started += 1;
            if empty_prefix {
                self.groups[g].prefix_complete = true;
                self.pending_groups.insert(g);
                if !self.admit_members(g, &mut b) {
                    break;
                }
            } else {
                self.prefix_in_progress.insert(g);
                b.push(EntryOwner::GroupPrefix(g), EntryKind::PrefixChunk, n);
            }
        }
        Ok(b.batch)
    }

    /// Tokens for the next chunk of group `g`'s prefix: block aligned unless
    /// it is the final chunk (or nothing else could run this iteration).
    fn prefix_chunk(&self, g: usize, b: &BatchBuilder) -> usize {
        let gs = &self.groups[g];
        let rem = gs.prefix_len - gs.prefix_done;
        let n = rem.min(b.budget);
        if n == rem {
            return n;
        }
        let aligned = n / self.config.block_size * self.config.block_size;
        if aligned == 0 && b.batch.entries.is_empty() {
            n
        } else {
            aligned
        }
    }

    fn start_group(&mut self, g: usize) {
        let gs = &mut self.groups[g];
        gs.slot_held = true;
        self.committed += gs.prefix_footprint + gs.slot;
        self.alloc.share_prefix(g, gs.members.len());
        for &r in &gs.members {
            self.requests[r].phase = Phase::PrefillPrefixPending;
        }
        self.next_group = g + 1;
    }

    /// Admits members of a started group in order until the batch, the cap or
    /// memory runs out. Returns `false` when admission stopped early.
    fn admit_members(&mut self, g: usize, b: &mut BatchBuilder) -> bool {
        let threshold = self.config.threshold();
        while self.groups[g].next_unadmitted < self.groups[g].members.len() {
            if !b.can_add_request() {
                return false;
            }
            let r = self.groups[g].members[self.groups[g].next_unadmitted];
            let use_slot = self.groups[g].slot_held && !self.groups[g].slot_occupied;
            if !use_slot {
                if self.committed + self.requests[r].footprint > threshold {
                    return false;
                }
                self.committed += self.requests[r].footprint;
            } else {
                self.groups[g].slot_occupied = true;
            }
            self.groups[g].next_unadmitted += 1;
            self.admit_request(r, use_slot, b);
        }
        self.pending_groups.remove(&g);
        true
    }

    fn admit_request(&mut self, r: usize, in_slot: bool, b: &mut BatchBuilder) {
        let bs = self.config.block_size;
        let group_prefix = self.groups[self.requests[r].group].prefix_len;
        let req = &mut self.requests[r];
        req.in_slot = in_slot;
        req.prefill_done = group_prefix;

        if let (Some(cache), Some(tokens)) = (self.cache.as_mut(), req.tokens.as_ref()) {
            req.hashes = block_hashes(tokens, bs);
            let hits = cache.lookup_prefix(&req.hashes);
            req.cache_refs.extend_from_slice(&req.hashes[..hits]);
            // the last prompt token is always recomputed
            let cached = (hits * bs).min(req.prompt_len - 1);
            req.cached_tokens = cached;
            req.prefill_done = cached;
            let blocks = cached.div_ceil(bs);
            self.alloc
                .ensure(Owner::Request(r), blocks)
                .expect("admission reservation bounds allocation");
        }

        let req = &mut self.requests[r];
        let rem = req.prompt_len - req.prefill_done;
        if rem == 0 {
            // the whole prompt is the shared prefix
            req.phase = Phase::Decoding;
            self.decode_queue.push(r);
            if b.budget > 0 {
                b.push(EntryOwner::Request(r), EntryKind::Decode, 1);
            }
        } else {
            req.phase = Phase::Prefilling;
            self.prefilling.insert(r);
            if b.budget > 0 {
                let n = rem.min(b.budget);
                b.push(EntryOwner::Request(r), EntryKind::DistinctChunk, n);
            }
        }
    }

    /// Applies a batch produced by [`Simulator::form_token_batch`].
    pub fn execute(&mut self, batch: TokenBatch) -> IterationTrace {
        let active = self.prefilling.len() + self.decode_queue.len();
        let mut finished = Vec::new();
        for e in &batch.entries {
            match (e.owner, e.kind) {
                (EntryOwner::GroupPrefix(g), _) => {
                    self.n_processed += e.tokens as u64;
                    let bs = self.config.block_size;
                    let gs = &mut self.groups[g];
                    gs.prefix_done += e.tokens;
                    let blocks = gs.prefix_done.div_ceil(bs);
                    self.alloc
                        .ensure(Owner::Prefix(g), blocks)
                        .expect("admission reservation bounds allocation");
                    if gs.prefix_done == gs.prefix_len {
                        gs.prefix_complete = true;
                        let plen = gs.prefix_len;
                        for &r in &gs.members {
                            self.requests[r].prefill_done = plen;
                        }
                        self.prefix_in_progress.remove(&g);
                        self.pending_groups.insert(g);
                    }
                }
                (EntryOwner::Request(r), EntryKind::DistinctChunk) => {
                    self.n_processed += e.tokens as u64;
                    let before = self.requests[r].prefill_done;
                    self.requests[r].prefill_done += e.tokens;
                    self.grow_request(r);
                    self.cache_new_blocks(r, before);
                    let req = &mut self.requests[r];
                    if req.prefill_done == req.prompt_len {
                        req.phase = Phase::Decoding;
                        self.prefilling.remove(&r);
                        self.decode_queue.push(r);
                    }
                }
                (EntryOwner::Request(r), _) => {
                    self.requests[r].decode_done += 1;
                    self.grow_request(r);
                    let req = &self.requests[r];
                    if req.decode_done == req.output_len {
                        finished.push(r);
                    }
                }
            }
        }
        for &r in &finished {
            self.finish(r);
        }
        if !finished.is_empty() {
            let requests = &self.requests;
            self.decode_queue.retain(|&r| requests[r].phase != Phase::Done);
        }

        let row = IterationTrace {
            iteration: self.iteration,
            total_tokens: batch.total_tokens(),
            decode_tokens: batch.decode_tokens(),
            prefill_tokens: batch.prefill_tokens(),
            blocks_used: self.alloc.used_blocks(),
            active_requests: active,
        };
        self.trace.push(row);
        self.last_batch = batch;
        self.iteration += 1;
        row
    }

    fn grow_request(&mut self, r: usize) {
        let blocks = self.requests[r].own_tokens().div_ceil(self.config.block_size);
        self.alloc
            .ensure(Owner::Request(r), blocks)
            .expect("admission reservation bounds allocation");
    }

    /// Inserts prompt blocks completed by this chunk into the LRU cache.
    fn cache_new_blocks(&mut self, r: usize, before: usize) {
        let Some(cache) = self.cache.as_mut() else {
            return;
        };
        let bs = self.config.block_size;
        let req = &mut self.requests[r];
        for j in before / bs..req.prefill_done / bs {
            let h = req.hashes[j];
            if cache.insert(h) {
                req.cache_refs.push(h);
            }
        }
    }

    fn finish(&mut self, r: usize) {
        let g = self.requests[r].group;
        self.requests[r].phase = Phase::Done;
        self.done += 1;
        self.alloc.free_owner(Owner::Request(r));
        if let Some(cache) = self.cache.as_mut() {
            for h in self.requests[r].cache_refs.drain(..) {
                cache.release(h);
            }
        }
        let gs = &mut self.groups[g];
        if self.requests[r].in_slot {
            gs.slot_occupied = false;
        } else {
            self.committed -= self.requests[r].footprint;
        }
        if gs.slot_held && !gs.slot_occupied && gs.next_unadmitted == gs.members.len() {
            gs.slot_held = false;
            self.committed -= gs.slot;
        }
        gs.live -= 1;
        if gs.live == 0 {
            self.committed -= gs.prefix_footprint;
        }
        self.alloc
            .release_prefix_ref(g)
            .expect("every member holds one prefix reference");
    }

    /// Runs one iteration: forms a batch and executes it.
    pub fn step(&mut self) -> Result<IterationTrace, SimError> {
        let batch = self.form_token_batch()?;
        if batch.entries.is_empty() {
            return Err(SimError::Stalled(self.iteration));
        }
        Ok(self.execute(batch))
    }

    pub fn run(mut self) -> Result<SimulationTrace, SimError> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(self.into_trace())
    }

    pub fn into_trace(self) -> SimulationTrace {
        SimulationTrace {
            policy: self.config.policy,
            chunk_size: self.config.chunk_size,
            n_requests: self.requests.len(),
            workload_fingerprint: self.fingerprint,
            n_processed_prefill_tokens: self.n_processed,
            n_logical_prefill_tokens: self.n_logical,
            iterations: self.trace,
        }
    }
}

struct BatchBuilder {
    budget: usize,
    cap: usize,
    requests: usize,
    batch: TokenBatch,
}

impl BatchBuilder {
    fn can_add_request(&self) -> bool {
        self.budget > 0 && self.requests < self.cap
    }

    fn push(&mut self, owner: EntryOwner, kind: EntryKind, tokens: usize) {
        debug_assert!(tokens > 0 && tokens <= self.budget);
        if matches!(owner, EntryOwner::Request(_)) {
            self.requests += 1;
        }
        self.budget -= tokens;
        self.batch.entries.push(BatchEntry { owner, kind, tokens });
    }
}

fn new_request(
    config: &SchedulerConfig,
    id: String,
    group: usize,
    shared_len: usize,
    prompt_len: usize,
    output_len: u32,
    tokens: Option<Vec<TokenId>>,
) -> RequestState {
    RequestState {
        id,
        group,
        phase: Phase::Waiting,
        prompt_len,
        prefill_done: 0,
        decode_done: 0,
        output_len,
        cached_tokens: 0,
        shared_len,
        footprint: config.blocks_for(prompt_len - shared_len + output_len as usize),
        in_slot: false,
        tokens,
        hashes: Vec::new(),
        cache_refs: Vec::new(),
    }
}

fn new_group(config: &SchedulerConfig, prefix_len: usize, members: Vec<usize>, requests: &[RequestState]) -> GroupState {
    let slot = members.iter().map(|&r| requests[r].footprint).max().unwrap_or(0);
    GroupState {
        prefix_len,
        prefix_done: 0,
        prefix_footprint: config.blocks_for(prefix_len),
        live: members.len(),
        members,
        next_unadmitted: 0,
        prefix_complete: prefix_len == 0,
        slot,
        slot_held: false,
        slot_occupied: false,
    }
}

/// Runs a full simulation.
pub fn simulate(input: SimInput<'_>, config: SchedulerConfig) -> Result<SimulationTrace, SimError> {
    Simulator::new(input, config)?.run()
}

#[cfg(test)]
mod tests;
