//! Requests, workloads, synthetic generators and the line-delimited JSON
//! workload file.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Vocabulary index. Semantics are opaque to everything in this crate.
pub type TokenId = u32;

/// Size of the vocabulary body tokens are drawn from.
const BODY_VOCAB: u32 = 32_000;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate request id `{0}`")]
    DuplicateId(String),
    #[error("request `{0}` has an empty prompt")]
    EmptyPrompt(String),
    #[error("request `{0}` has output_len 0")]
    ZeroOutput(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One unit of work: a prompt and the number of tokens it will decode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub output_len: u32,
}

impl Request {
    pub fn new(id: impl Into<String>, tokens: Vec<TokenId>, output_len: u32) -> Self {
        Self {
            id: id.into(),
            tokens,
            output_len,
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.tokens.len()
    }

    fn validate(&self) -> Result<(), WorkloadError> {
        if self.tokens.is_empty() {
            return Err(WorkloadError::EmptyPrompt(self.id.clone()));
        }
        if self.output_len == 0 {
            return Err(WorkloadError::ZeroOutput(self.id.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Workload {
    pub requests: Vec<Request>,
}

impl Workload {
    /// Builds a workload, rejecting empty prompts, zero output lengths and
    /// duplicate ids.
    pub fn new(requests: Vec<Request>) -> Result<Self, WorkloadError> {
        let w = Self { requests };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut seen = HashSet::with_capacity(self.requests.len());
        for r in &self.requests {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(WorkloadError::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Sum of all prompt lengths (the logical prefill token count).
    pub fn logical_prefill_tokens(&self) -> u64 {
        self.requests.iter().map(|r| r.tokens.len() as u64).sum()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(
            self.requests
                .iter()
                .map(|r| (r.id.as_str(), [r.tokens.as_slice()], r.output_len)),
        )
    }
}

/// Order-independent digest of a request set.
///
/// Each item is `(id, prompt pieces, output_len)`; the pieces are hashed as
/// one concatenated prompt so a workload and its prefix/suffix grouping yield
/// the same value.
pub fn fingerprint<'a, I, P>(items: I) -> String
where
    I: IntoIterator<Item = (&'a str, P, u32)>,
    P: IntoIterator<Item = &'a [TokenId]>,
{
    let mut per_request: Vec<(String, [u8; 32])> = items
        .into_iter()
        .map(|(id, pieces, output_len)| {
            let mut h = Sha256::new();
            for piece in pieces {
                for t in piece {
                    h.update(t.to_le_bytes());
                }
            }
            h.update(b"|");
            h.update(output_len.to_le_bytes());
            (id.to_owned(), h.finalize().into())
        })
        .collect();
    per_request.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (id, digest) in &per_request {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update(digest);
    }
    let out = h.finalize();
    out[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Shape of a shared-prefix microbenchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub prefix_len: usize,
    pub distinct_len: usize,
    pub sharing_degree: usize,
    pub num_groups: usize,
    pub output_len: u32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.prefix_len == 0 {
            return Err(WorkloadError::InvalidSpec("prefix_len must be positive"));
        }
        if self.distinct_len == 0 {
            return Err(WorkloadError::InvalidSpec("distinct_len must be positive"));
        }
        if self.sharing_degree == 0 {
            return Err(WorkloadError::InvalidSpec("sharing_degree must be at least 1"));
        }
        if self.num_groups == 0 {
            return Err(WorkloadError::InvalidSpec("num_groups must be positive"));
        }
        if self.output_len == 0 {
            return Err(WorkloadError::InvalidSpec("output_len must be positive"));
        }
        let reserved = self.num_groups as u64 + self.sharing_degree as u64;
        if reserved + BODY_VOCAB as u64 > u32::MAX as u64 {
            return Err(WorkloadError::InvalidSpec("too many groups for 32-bit token ids"));
        }
        Ok(())
    }
}

/// Per-group token stream. ChaCha is counter based, so selecting the stream
/// by group index gives the same tokens on every platform regardless of how
/// many groups precede it.
fn group_rng(seed: u64, group: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group);
    rng
}

fn body_tokens(rng: &mut impl RngCore, base: u32, n: usize) -> impl Iterator<Item = TokenId> + '_ {
    (0..n).map(move |_| base + rng.random_range(0..BODY_VOCAB))
}

/// Generates `num_groups * sharing_degree` requests. Token id layout:
///
/// * `0..num_groups` — first token of each group prefix (one per group)
/// * `num_groups..num_groups + sharing_degree` — first token of each suffix
///   within a group
/// * everything above — body tokens
///
/// so in-group prompts share exactly `prefix_len` leading tokens and prompts
/// of different groups share none.
pub fn generate_microbenchmark(spec: &SyntheticSpec) -> Result<Workload, WorkloadError> {
    spec.validate()?;
    let suffix_base = spec.num_groups as u32;
    let body_base = suffix_base + spec.sharing_degree as u32;
    let mut requests = Vec::with_capacity(spec.num_groups * spec.sharing_degree);
    for g in 0..spec.num_groups {
        let mut rng = group_rng(spec.seed, g as u64);
        let mut prefix = Vec::with_capacity(spec.prefix_len);
        prefix.push(g as TokenId);
        prefix.extend(body_tokens(&mut rng, body_base, spec.prefix_len - 1));
        for m in 0..spec.sharing_degree {
            let mut tokens = Vec::with_capacity(spec.prefix_len + spec.distinct_len);
            tokens.extend_from_slice(&prefix);
            tokens.push(suffix_base + m as TokenId);
            tokens.extend(body_tokens(&mut rng, body_base, spec.distinct_len - 1));
            requests.push(Request::new(format!("g{g}-r{m}"), tokens, spec.output_len));
        }
    }
    Ok(Workload { requests })
}

/// Moment-matched stand-in for a document/query workload: a short instruction
/// shared by every prompt, then a per-document body shared by a few queries,
/// then a short per-query tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndustrySpec {
    pub num_requests: usize,
    /// Length of the instruction every prompt starts with.
    pub instruction_len: usize,
    /// Mean of instruction + document length.
    pub mean_prefix_len: usize,
    pub mean_distinct_len: usize,
    /// Queries per document are uniform on `1..=max_sharing_degree`.
    pub max_sharing_degree: usize,
    pub output_len: u32,
    pub seed: u64,
}

impl Default for IndustrySpec {
    fn default() -> Self {
        Self {
            num_requests: 8000,
            instruction_len: 32,
            mean_prefix_len: 1570,
            mean_distinct_len: 30,
            max_sharing_degree: 5,
            output_len: 100,
            seed: 0,
        }
    }
}

impl IndustrySpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.num_requests == 0 {
            return Err(WorkloadError::InvalidSpec("num_requests must be positive"));
        }
        if self.mean_prefix_len <= self.instruction_len {
            return Err(WorkloadError::InvalidSpec(
                "mean_prefix_len must exceed instruction_len",
            ));
        }
        if self.mean_distinct_len == 0 || self.max_sharing_degree == 0 || self.output_len == 0 {
            return Err(WorkloadError::InvalidSpec(
                "distinct length, sharing degree and output length must be positive",
            ));
        }
        Ok(())
    }
}

/// Generates an [`IndustrySpec`] workload in document order (call
/// [`shuffle_workload`] for a randomized arrival order).
pub fn generate_industry(spec: &IndustrySpec) -> Result<Workload, WorkloadError> {
    spec.validate()?;
    // Token layout: [0, n) document sentinels, [n, 2n) query sentinels
    // (indexed by position within the document), then instruction and body.
    let n = spec.num_requests as u32;
    let instruction_base = 2 * n;
    let body_base = instruction_base + spec.instruction_len as u32;

    let mut meta = ChaCha8Rng::seed_from_u64(spec.seed);
    let doc_mean = spec.mean_prefix_len - spec.instruction_len;
    let instruction: Vec<TokenId> = (0..spec.instruction_len as u32)
        .map(|i| instruction_base + i)
        .collect();

    let mut requests = Vec::with_capacity(spec.num_requests);
    let mut doc = 0u64;
    while requests.len() < spec.num_requests {
        let sharing = meta.random_range(1..=spec.max_sharing_degree);
        let doc_len = meta.random_range(doc_mean / 2..=doc_mean + doc_mean / 2).max(1);
        let mut rng = group_rng(spec.seed, doc + 1);
        let mut prefix = instruction.clone();
        prefix.push(doc as TokenId);
        prefix.extend(body_tokens(&mut rng, body_base, doc_len - 1));
        for q in 0..sharing {
            if requests.len() == spec.num_requests {
                break;
            }
            let distinct = rng.random_range(1..=2 * spec.mean_distinct_len - 1);
            let mut tokens = prefix.clone();
            tokens.push(n + q as TokenId);
            tokens.extend(body_tokens(&mut rng, body_base, distinct - 1));
            requests.push(Request::new(format!("d{doc}-q{q}"), tokens, spec.output_len));
        }
        doc += 1;
    }
    Ok(Workload { requests })
}

/// Deterministic permutation of the requests.
pub fn shuffle_workload(w: &Workload, seed: u64) -> Workload {
    let mut requests = w.requests.clone();
    requests.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Workload { requests }
}

pub fn read_workload(path: impl AsRef<Path>) -> Result<Workload, WorkloadError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_workload(BufReader::new(file))
}

/// Parses line-delimited JSON records. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_workload(reader: impl BufRead) -> Result<Workload, WorkloadError> {
    let mut requests = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| WorkloadError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        requests.push(request);
    }
    Workload::new(requests)
}

pub fn write_workload(w: &Workload, path: impl AsRef<Path>) -> Result<(), WorkloadError> {
    let path = path.as_ref();
    let io_err = |source| WorkloadError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in &w.requests {
        serde_json::to_writer(&mut out, r).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcp(a: &[TokenId], b: &[TokenId]) -> usize {
        a.iter().zip(b).take_while(|(x, y)| x == y).count()
    }

    fn spec(p: usize, d: usize, sd: usize, g: usize, out: u32) -> SyntheticSpec {
        SyntheticSpec {
            prefix_len: p,
            distinct_len: d,
            sharing_degree: sd,
            num_groups: g,
            output_len: out,
            seed: 42,
        }
    }

    #[test]
    fn microbenchmark_paper_shape() {
        let w = generate_microbenchmark(&spec(2000, 200, 16, 400, 100)).unwrap();
        assert_eq!(w.len(), 6400);
        assert!(w.requests.iter().all(|r| r.tokens.len() == 2200));
        assert!(w.validate().is_ok());
    }

    #[test]
    fn degenerate_single_request() {
        let w = generate_microbenchmark(&spec(10, 5, 1, 1, 1)).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.requests[0].tokens.len(), 15);
    }

    #[test]
    fn pairwise_lcp_structure() {
        let w = generate_microbenchmark(&spec(8, 2, 3, 2, 4)).unwrap();
        assert_eq!(w.len(), 6);
        for (i, a) in w.requests.iter().enumerate() {
            for (j, b) in w.requests.iter().enumerate().skip(i + 1) {
                let same_group = i / 3 == j / 3;
                let expected = if same_group { 8 } else { 0 };
                assert_eq!(lcp(&a.tokens, &b.tokens), expected, "{} vs {}", a.id, b.id);
            }
        }
    }

    #[test]
    fn generation_is_pure() {
        let s = spec(50, 7, 4, 9, 3);
        assert_eq!(generate_microbenchmark(&s).unwrap(), generate_microbenchmark(&s).unwrap());
        let other = SyntheticSpec { seed: 43, ..s };
        assert_ne!(generate_microbenchmark(&s).unwrap(), generate_microbenchmark(&other).unwrap());
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate_microbenchmark(&spec(0, 1, 1, 1, 1)).is_err());
        assert!(generate_microbenchmark(&spec(1, 1, 0, 1, 1)).is_err());
        assert!(generate_microbenchmark(&spec(1, 1, 1, 1, 0)).is_err());
    }

    #[test]
    fn shuffle_empty_and_deterministic() {
        assert!(shuffle_workload(&Workload::default(), 3).is_empty());
        let w = generate_microbenchmark(&spec(4, 2, 16, 400, 1)).unwrap();
        let a = shuffle_workload(&w, 11);
        let b = shuffle_workload(&w, 11);
        assert_eq!(a, b);
        assert_ne!(a.requests, w.requests);
        let mut ids_a: Vec<_> = a.requests.iter().map(|r| r.id.clone()).collect();
        let mut ids_w: Vec<_> = w.requests.iter().map(|r| r.id.clone()).collect();
        ids_a.sort();
        ids_w.sort();
        assert_eq!(ids_a, ids_w);
    }

    #[test]
    fn fingerprint_ignores_order() {
        let w = generate_microbenchmark(&spec(4, 2, 4, 5, 1)).unwrap();
        assert_eq!(w.fingerprint(), shuffle_workload(&w, 1).fingerprint());
        let mut changed = w.clone();
        changed.requests[0].output_len += 1;
        assert_ne!(w.fingerprint(), changed.fingerprint());
    }

    #[test]
    fn parse_two_records_in_order() {
        let text = "{\"id\":\"a\",\"tokens\":[1,2,3],\"output_len\":4}\n\
                    {\"id\":\"b\",\"tokens\":[7],\"output_len\":1}\n";
        let w = parse_workload(text.as_bytes()).unwrap();
        assert_eq!(
            w.requests,
            vec![Request::new("a", vec![1, 2, 3], 4), Request::new("b", vec![7], 1)]
        );
    }

    #[test]
    fn parse_missing_output_len_names_line() {
        let text = "{\"id\":\"a\",\"tokens\":[1],\"output_len\":1}\n{\"id\":\"b\",\"tokens\":[1]}\n";
        match parse_workload(text.as_bytes()) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_duplicates_and_negative_tokens() {
        let dup = "{\"id\":\"a\",\"tokens\":[1],\"output_len\":1}\n{\"id\":\"a\",\"tokens\":[2],\"output_len\":1}\n";
        assert!(matches!(parse_workload(dup.as_bytes()), Err(WorkloadError::DuplicateId(_))));
        let neg = "{\"id\":\"a\",\"tokens\":[-1],\"output_len\":1}\n";
        assert!(matches!(parse_workload(neg.as_bytes()), Err(WorkloadError::Parse { line: 1, .. })));
        let zero = "{\"id\":\"a\",\"tokens\":[1],\"output_len\":0}\n";
        assert!(matches!(parse_workload(zero.as_bytes()), Err(WorkloadError::ZeroOutput(_))));
    }

    #[test]
    fn industry_moments() {
        let w = generate_industry(&IndustrySpec::default()).unwrap();
        assert_eq!(w.len(), 8000);
        w.validate().unwrap();
        let mean_len = w.logical_prefill_tokens() as f64 / w.len() as f64;
        // prefix ~1570 + distinct ~30
        assert!((mean_len - 1600.0).abs() < 60.0, "mean prompt {mean_len}");
    }
}
