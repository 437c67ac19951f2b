//! Compact prefix tree over prompts, first-level prefix enlargement and
//! prefix-sharing group extraction.
//!
//! The enlargement pass works bottom-up. After a node's children have been
//! processed, each grandchild `g` under child `c` is forked into a new child
//! of the node (span `c.tokens ++ g.tokens`) when
//!
//! ```text
//! (leaves(g) - 1) * tokens(g)  >  tokens(c)
//! ```
//!
//! Moving `g` up changes the node's first-level saving by exactly
//! `(leaves(g) - 1) * tokens(g) - tokens(c)`: the `leaves(g)` requests stop
//! sharing `c` (losing `tokens(c)` each, except that `c` was only counted
//! `leaves(c) - 1` times) and start sharing the longer span among themselves.
//! The strict inequality therefore accepts exactly the forks that improve the
//! saving; ties are left alone.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::{fingerprint, Request, TokenId, Workload};

/// Largest workload the exhaustive partition oracle accepts.
pub const MAX_ORACLE_REQUESTS: usize = 10;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate request id `{0}` in groups")]
    DuplicateId(String),
    #[error("group {0} has no members")]
    EmptyGroup(usize),
    #[error("member `{0}` has an empty prompt")]
    EmptyPrompt(String),
    #[error("member `{0}` has output_len 0")]
    ZeroOutput(String),
    #[error("partition oracle supports at most {max} requests, got {got}")]
    OracleCapacity { got: usize, max: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    /// Edge label. Empty only for the root.
    pub tokens: Vec<TokenId>,
    pub children: Vec<TreeNode>,
    /// Indices (into the source workload) of prompts ending at this node.
    pub leaf_ids: Vec<usize>,
    leaves: usize,
}

impl TreeNode {
    fn new(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            children: Vec::new(),
            leaf_ids: Vec::new(),
            leaves: 0,
        }
    }

    /// Number of prompts in this subtree.
    pub fn leaves(&self) -> usize {
        self.leaves
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    fn insert(&mut self, rest: &[TokenId], idx: usize) {
        self.leaves += 1;
        let Some(&first) = rest.first() else {
            self.leaf_ids.push(idx);
            return;
        };
        match self.children.binary_search_by_key(&first, |c| c.tokens[0]) {
            Ok(pos) => {
                let child = &mut self.children[pos];
                let common = common_prefix_len(&child.tokens, rest);
                if common < child.tokens.len() {
                    child.split_at(common);
                }
                child.insert(&rest[common..], idx);
            }
            Err(pos) => {
                let mut leaf = TreeNode::new(rest.to_vec());
                leaf.leaves = 1;
                leaf.leaf_ids.push(idx);
                self.children.insert(pos, leaf);
            }
        }
    }

    /// Keeps `tokens[..at]` here and pushes the rest into a single child.
    fn split_at(&mut self, at: usize) {
        let tail = TreeNode {
            tokens: self.tokens.split_off(at),
            children: std::mem::take(&mut self.children),
            leaf_ids: std::mem::take(&mut self.leaf_ids),
            leaves: self.leaves,
        };
        self.children.push(tail);
    }

    /// Merges a pass-through node (no own prompts, one child) with its child.
    fn compact(&mut self) {
        while self.leaf_ids.is_empty() && self.children.len() == 1 {
            let child = self.children.pop().expect("one child");
            self.tokens.extend(child.tokens);
            self.children = child.children;
            self.leaf_ids = child.leaf_ids;
        }
    }

    fn maximize_reuse(&mut self) {
        if self.children.is_empty() {
            return;
        }
        let mut forks = Vec::new();
        for child in &mut self.children {
            child.maximize_reuse();
            let penalty = child.tokens.len();
            let grandchildren = std::mem::take(&mut child.children);
            for g in grandchildren {
                let gain = (g.leaves - 1) * g.tokens.len();
                if gain > penalty {
                    child.leaves -= g.leaves;
                    let mut tokens = Vec::with_capacity(child.tokens.len() + g.tokens.len());
                    tokens.extend_from_slice(&child.tokens);
                    tokens.extend_from_slice(&g.tokens);
                    forks.push(TreeNode { tokens, ..g });
                } else {
                    child.children.push(g);
                }
            }
            child.compact();
        }
        self.children.retain(|c| c.leaves > 0);
        self.children.extend(forks);
        self.children.sort_by(|a, b| a.tokens.cmp(&b.tokens));
    }

    fn visit<'a>(&'a self, depth: usize, f: &mut impl FnMut(&'a TreeNode, usize)) {
        f(self, depth);
        for c in &self.children {
            c.visit(depth + 1, f);
        }
    }

    fn collect_leaf_ids(&self, out: &mut Vec<usize>) {
        out.extend_from_slice(&self.leaf_ids);
        for c in &self.children {
            c.collect_leaf_ids(out);
        }
    }
}

fn common_prefix_len(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixTree {
    pub root: TreeNode,
}

impl PrefixTree {
    /// Total number of nodes, root included.
    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.root.visit(0, &mut |_, _| n += 1);
        n
    }

    /// Saving from sharing only the root's children:
    /// sum of `(leaves(c) - 1) * tokens(c)` over children with two or more
    /// prompts.
    pub fn first_level_saved_tokens(&self) -> u64 {
        self.root
            .children
            .iter()
            .filter(|c| c.leaves >= 2)
            .map(|c| ((c.leaves - 1) * c.tokens.len()) as u64)
            .sum()
    }

    /// Saving when every shared node at every depth is computed once.
    pub fn multi_level_saved_tokens(&self) -> u64 {
        let mut saved = 0u64;
        self.root.visit(0, &mut |n, depth| {
            if depth > 0 && n.leaves >= 2 {
                saved += ((n.leaves - 1) * n.tokens.len()) as u64;
            }
        });
        saved
    }

    /// Every root-to-node path that ends a prompt, as `(request index, tokens)`.
    pub fn spelled_prompts(&self) -> Vec<(usize, Vec<TokenId>)> {
        fn walk(n: &TreeNode, path: &mut Vec<TokenId>, out: &mut Vec<(usize, Vec<TokenId>)>) {
            path.extend_from_slice(&n.tokens);
            for &id in &n.leaf_ids {
                out.push((id, path.clone()));
            }
            for c in &n.children {
                walk(c, path, out);
            }
            path.truncate(path.len() - n.tokens.len());
        }
        let mut out = Vec::new();
        walk(&self.root, &mut Vec::new(), &mut out);
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

/// Builds the radix tree of all prompts. Children are ordered by first token,
/// so the shape does not depend on request order.
pub fn build_tree(w: &Workload) -> PrefixTree {
    let mut root = TreeNode::new(Vec::new());
    for (idx, r) in w.requests.iter().enumerate() {
        root.insert(&r.tokens, idx);
    }
    PrefixTree { root }
}

/// Runs the bottom-up first-level enlargement on a copy of `t`.
pub fn maximize_reuse(t: &PrefixTree) -> PrefixTree {
    let mut out = t.clone();
    out.root.maximize_reuse();
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupMember {
    pub id: String,
    pub suffix: Vec<TokenId>,
    pub output_len: u32,
}

/// One shared prefix and the requests that reuse it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrefixSharingGroup {
    pub prefix: Vec<TokenId>,
    pub members: Vec<GroupMember>,
}

impl PrefixSharingGroup {
    pub fn prefix_len(&self) -> usize {
        self.prefix.len()
    }

    pub fn distinct_tokens(&self) -> usize {
        self.members.iter().map(|m| m.suffix.len()).sum()
    }

    /// Prefill tokens actually computed for the group: the prefix once plus
    /// every suffix.
    pub fn processed_tokens(&self) -> usize {
        self.prefix_len() + self.distinct_tokens()
    }

    /// Prefill tokens without any sharing.
    pub fn logical_tokens(&self) -> usize {
        self.members.len() * self.prefix_len() + self.distinct_tokens()
    }

    pub fn saved_tokens(&self) -> usize {
        self.members.len().saturating_sub(1) * self.prefix_len()
    }

    pub fn prompt(&self, member: usize) -> Vec<TokenId> {
        let mut p = self.prefix.clone();
        p.extend_from_slice(&self.members[member].suffix);
        p
    }
}

/// One group per first-level child. Children shared by two or more prompts
/// keep their span as the prefix and expand everything below it into member
/// suffixes; single-prompt children become singleton groups with an empty
/// prefix. Members are listed in workload order.
pub fn extract_groups(t: &PrefixTree, w: &Workload) -> Vec<PrefixSharingGroup> {
    let mut groups = Vec::with_capacity(t.root.children.len() + 1);
    let mut root_ids = t.root.leaf_ids.clone();
    root_ids.sort_unstable();
    for idx in root_ids {
        groups.push(singleton(&w.requests[idx]));
    }
    for child in &t.root.children {
        let mut ids = Vec::with_capacity(child.leaves);
        child.collect_leaf_ids(&mut ids);
        ids.sort_unstable();
        if ids.len() >= 2 {
            let plen = child.tokens.len();
            let members = ids
                .iter()
                .map(|&idx| {
                    let r = &w.requests[idx];
                    debug_assert_eq!(&r.tokens[..plen], child.tokens.as_slice());
                    GroupMember {
                        id: r.id.clone(),
                        suffix: r.tokens[plen..].to_vec(),
                        output_len: r.output_len,
                    }
                })
                .collect();
            groups.push(PrefixSharingGroup {
                prefix: child.tokens.clone(),
                members,
            });
        } else {
            groups.extend(ids.iter().map(|&idx| singleton(&w.requests[idx])));
        }
    }
    groups
}

fn singleton(r: &Request) -> PrefixSharingGroup {
    PrefixSharingGroup {
        prefix: Vec::new(),
        members: vec![GroupMember {
            id: r.id.clone(),
            suffix: r.tokens.clone(),
            output_len: r.output_len,
        }],
    }
}

/// Tree construction, enlargement and extraction in one call.
pub fn plan(w: &Workload) -> Vec<PrefixSharingGroup> {
    extract_groups(&maximize_reuse(&build_tree(w)), w)
}

pub fn saved_tokens(groups: &[PrefixSharingGroup]) -> u64 {
    groups.iter().map(|g| g.saved_tokens() as u64).sum()
}

pub fn logical_tokens(groups: &[PrefixSharingGroup]) -> u64 {
    groups.iter().map(|g| g.logical_tokens() as u64).sum()
}

pub fn processed_tokens(groups: &[PrefixSharingGroup]) -> u64 {
    groups.iter().map(|g| g.processed_tokens() as u64).sum()
}

/// `1 - processed / logical` prefill tokens (the same expression as the
/// trace metric, so the two agree bit for bit); 0 for an empty group list.
pub fn saving_ratio_static(groups: &[PrefixSharingGroup]) -> f64 {
    let logical = logical_tokens(groups);
    if logical == 0 {
        return 0.0;
    }
    1.0 - processed_tokens(groups) as f64 / logical as f64
}

/// Flattens groups back into requests, in group order.
pub fn groups_to_workload(groups: &[PrefixSharingGroup]) -> Workload {
    let requests = groups
        .iter()
        .flat_map(|g| {
            g.members.iter().enumerate().map(move |(i, m)| Request {
                id: m.id.clone(),
                tokens: g.prompt(i),
                output_len: m.output_len,
            })
        })
        .collect();
    Workload { requests }
}

/// Same digest as [`Workload::fingerprint`] of the flattened groups.
pub fn groups_fingerprint(groups: &[PrefixSharingGroup]) -> String {
    fingerprint(groups.iter().flat_map(|g| {
        g.members
            .iter()
            .map(move |m| (m.id.as_str(), [g.prefix.as_slice(), m.suffix.as_slice()], m.output_len))
    }))
}

pub fn validate_groups(groups: &[PrefixSharingGroup]) -> Result<(), PlanError> {
    let mut seen = HashSet::new();
    for (i, g) in groups.iter().enumerate() {
        if g.members.is_empty() {
            return Err(PlanError::EmptyGroup(i));
        }
        for m in &g.members {
            if !seen.insert(m.id.as_str()) {
                return Err(PlanError::DuplicateId(m.id.clone()));
            }
            if g.prefix.is_empty() && m.suffix.is_empty() {
                return Err(PlanError::EmptyPrompt(m.id.clone()));
            }
            if m.output_len == 0 {
                return Err(PlanError::ZeroOutput(m.id.clone()));
            }
        }
    }
    Ok(())
}

pub fn read_groups(path: impl AsRef<Path>) -> Result<Vec<PrefixSharingGroup>, PlanError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| PlanError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_groups(BufReader::new(file))
}

pub fn parse_groups(reader: impl BufRead) -> Result<Vec<PrefixSharingGroup>, PlanError> {
    let mut groups = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let err = |message: String| PlanError::Parse { line: i + 1, message };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        groups.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    validate_groups(&groups)?;
    Ok(groups)
}

pub fn write_groups(groups: &[PrefixSharingGroup], path: impl AsRef<Path>) -> Result<(), PlanError> {
    let path = path.as_ref();
    let io_err = |source| PlanError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for g in groups {
        serde_json::to_writer(&mut out, g).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Best single-level grouping found by exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalPartition {
    pub saved_tokens: u64,
    pub ratio: f64,
    /// Blocks of request indices; every index appears exactly once.
    pub blocks: Vec<Vec<usize>>,
}

/// Enumerates every set partition of the requests and maximizes
/// `sum over blocks of (|block| - 1) * lcp(block)`.
pub fn optimal_partition_oracle(w: &Workload) -> Result<OptimalPartition, PlanError> {
    let n = w.len();
    if n > MAX_ORACLE_REQUESTS {
        return Err(PlanError::OracleCapacity {
            got: n,
            max: MAX_ORACLE_REQUESTS,
        });
    }
    // value of every subset as a block
    let mut block_value = vec![0u64; 1 << n];
    for (mask, value) in block_value.iter_mut().enumerate().skip(1) {
        let members: Vec<&[TokenId]> = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| w.requests[i].tokens.as_slice())
            .collect();
        let lcp = members[1..]
            .iter()
            .fold(members[0].len(), |acc, t| acc.min(common_prefix_len(members[0], t)));
        *value = ((members.len() - 1) * lcp) as u64;
    }

    struct Search<'a> {
        n: usize,
        block_value: &'a [u64],
        blocks: Vec<usize>,
        best: u64,
        best_blocks: Vec<usize>,
    }
    impl Search<'_> {
        fn go(&mut self, i: usize) {
            if i == self.n {
                let v: u64 = self.blocks.iter().map(|&m| self.block_value[m]).sum();
                if v > self.best || self.best_blocks.is_empty() {
                    self.best = v;
                    self.best_blocks = self.blocks.clone();
                }
                return;
            }
            for b in 0..self.blocks.len() {
                self.blocks[b] |= 1 << i;
                self.go(i + 1);
                self.blocks[b] &= !(1 << i);
            }
            self.blocks.push(1 << i);
            self.go(i + 1);
            self.blocks.pop();
        }
    }

    let mut s = Search {
        n,
        block_value: &block_value,
        blocks: Vec::new(),
        best: 0,
        best_blocks: Vec::new(),
    };
    s.go(0);
    let logical = w.logical_prefill_tokens();
    let blocks = s
        .best_blocks
        .iter()
        .map(|&m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect();
    Ok(OptimalPartition {
        saved_tokens: s.best,
        ratio: if logical == 0 { 0.0 } else { s.best as f64 / logical as f64 },
        blocks,
    })
}
