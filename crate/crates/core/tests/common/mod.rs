#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use prefixbatch::prefix_tree::plan;
use prefixbatch::scheduler::{
    EntryKind, EntryOwner, Phase, Policy, SchedulerConfig, SimError, SimInput, SimulationTrace, Simulator,
};
use prefixbatch::workload::{Request, Workload};
use rand::Rng;

/// Steps a simulation to completion, checking every scheduler invariant on
/// the way. Returns the trace or a description of the first violation.
pub fn checked_run(w: &Workload, config: &SchedulerConfig) -> Result<SimulationTrace, String> {
    let groups;
    let input = if config.policy == Policy::BatchLlm {
        groups = plan(w);
        SimInput::Groups(&groups)
    } else {
        SimInput::Workload(w)
    };
    let mut sim = Simulator::new(input, config.clone()).map_err(|e| format!("setup: {e}"))?;
    let n_groups = sim.requests().iter().map(|r| r.group + 1).max().unwrap_or(0);
    // iteration in which each group's prefix completed; None if not yet
    let mut completed: Vec<Option<usize>> = (0..n_groups)
        .map(|g| sim.prefix_complete(g).then_some(0))
        .collect();
    let bound: u64 = w
        .requests
        .iter()
        .map(|r| (r.prompt_len() + r.output_len as usize) as u64)
        .sum();
    let total = config.total_blocks;

    while !sim.is_finished() {
        let it = sim.iteration();
        if it as u64 > bound {
            return Err(format!("no termination after {bound} iterations"));
        }
        let batch = sim.form_token_batch().map_err(|e| format!("iteration {it}: {e}"))?;
        if batch.total_tokens() > config.chunk_size {
            return Err(format!("iteration {it}: {} tokens > chunk {}", batch.total_tokens(), config.chunk_size));
        }
        if config.policy.is_fcfs() && batch.request_count() > config.request_cap {
            return Err(format!("iteration {it}: {} requests > cap", batch.request_count()));
        }
        let mut decoders = HashSet::new();
        for e in &batch.entries {
            match (e.owner, e.kind) {
                (EntryOwner::Request(r), EntryKind::Decode) => {
                    if e.tokens != 1 || !decoders.insert(r) {
                        return Err(format!("iteration {it}: bad decode entry for {r}"));
                    }
                }
                (EntryOwner::Request(r), EntryKind::DistinctChunk) => {
                    let g = sim.requests()[r].group;
                    if completed[g].is_none_or(|c| c > it) {
                        return Err(format!("iteration {it}: distinct chunk of {r} before its prefix"));
                    }
                }
                (EntryOwner::GroupPrefix(_), EntryKind::PrefixChunk) => {}
                other => return Err(format!("iteration {it}: malformed entry {other:?}")),
            }
        }
        let row = sim.execute(batch);
        if row.blocks_used > total || sim.allocator().used_blocks() > total {
            return Err(format!("iteration {it}: {} blocks used of {total}", row.blocks_used));
        }
        for (g, c) in completed.iter_mut().enumerate() {
            if c.is_none() && sim.prefix_complete(g) {
                *c = Some(it);
            }
        }
    }

    if let Some(r) = sim.requests().iter().find(|r| r.phase != Phase::Done) {
        return Err(format!("request {} not done", r.id));
    }
    let a = sim.allocator();
    if a.used_blocks() != 0 || a.allocated_total() != a.freed_total() {
        return Err(format!("allocator not empty at end: {} used", a.used_blocks()));
    }
    let trace = sim.into_trace();
    let out: u64 = w.requests.iter().map(|r| r.output_len as u64).sum();
    if trace.total_decode_tokens() != out {
        return Err(format!("decode tokens {} != {out}", trace.total_decode_tokens()));
    }
    if trace.total_prefill_tokens() != trace.n_processed_prefill_tokens {
        return Err("prefill tokens traced != processed counter".into());
    }
    if trace.n_logical_prefill_tokens != w.logical_prefill_tokens() {
        return Err("logical token counter mismatch".into());
    }
    Ok(trace)
}

/// Small random workload with plenty of shared prefixes: prompts are drawn
/// from a few random stems and extended with random tails.
pub fn random_workload<R: Rng>(rng: &mut R) -> Workload {
    let n = rng.random_range(1..=24);
    let alphabet = rng.random_range(1..=4u32);
    let stems: Vec<Vec<u32>> = (0..rng.random_range(1..=4))
        .map(|_| (0..rng.random_range(0..=40)).map(|_| rng.random_range(0..alphabet)).collect())
        .collect();
    let requests = (0..n)
        .map(|i| {
            let mut tokens = stems[rng.random_range(0..stems.len())].clone();
            tokens.extend((0..rng.random_range(0..=12)).map(|_| rng.random_range(0..alphabet)));
            if tokens.is_empty() {
                tokens.push(0);
            }
            Request::new(format!("r{i}"), tokens, rng.random_range(1..=12))
        })
        .collect();
    Workload::new(requests).expect("ids are unique")
}

/// Random config able to schedule `w` under `policy`.
pub fn random_config<R: Rng>(rng: &mut R, w: &Workload, policy: Policy) -> SchedulerConfig {
    let block_size = rng.random_range(1..=8);
    let longest = w
        .requests
        .iter()
        .map(|r| r.prompt_len() + r.output_len as usize)
        .max()
        .unwrap_or(1);
    // a lone group's prefix plus one member always fits
    let floor = 2 * longest.div_ceil(block_size) + 2;
    let total_blocks = floor + rng.random_range(0..=4 * floor);
    let mem_threshold = rng.random_bool(0.3).then(|| rng.random_range(floor..=total_blocks));
    SchedulerConfig {
        chunk_size: rng.random_range(1..=64),
        block_size,
        total_blocks,
        mem_threshold,
        policy,
        request_cap: rng.random_range(1..=8),
        lru_blocks: rng.random_range(0..=32),
        reorder: rng.random_bool(0.8),
        max_new_groups_per_iter: rng.random_bool(0.2).then(|| rng.random_range(1..=3)),
    }
}

pub fn random_policy<R: Rng>(rng: &mut R) -> Policy {
    Policy::ALL[rng.random_range(0..Policy::ALL.len())]
}

/// Tokens of every request keyed by id, for cross-representation checks.
pub fn prompts_by_id(w: &Workload) -> HashMap<String, Vec<u32>> {
    w.requests.iter().map(|r| (r.id.clone(), r.tokens.clone())).collect()
}

pub fn is_unschedulable(e: &SimError) -> bool {
    matches!(e, SimError::Unschedulable { .. })
}
