//! Double-precision reference for attention over a shared prefix.
//!
//! Attention over keys split into segments is computed one segment at a time
//! as a [`PartialResult`] (unnormalized output plus per-row running max and
//! sum of exponentials) and segments are combined with the online-softmax
//! [`merge`]. For a group of requests sharing a prefix, the prefix partial is
//! computed once over all of the group's queries stacked together.
//!
//! There is no causal masking: every query row sees every key of every
//! segment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("matrix data has {got} values, expected {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, got: usize },
    #[error("matrix must have at least one column")]
    ZeroColumns,
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("scale must be finite and non-negative, got {0}")]
    BadScale(f64),
    #[error("row {0} attends to no keys")]
    EmptySegment(usize),
}

type Result<T> = std::result::Result<T, AttentionError>;

/// Dense row-major matrix. Zero rows are allowed and stand for an empty
/// key/value segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(AttentionError::ZeroColumns);
        }
        if data.len() != rows * cols {
            return Err(AttentionError::BadShape {
                rows,
                cols,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AttentionError::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn random<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Rows of all inputs, in order. Inputs must share a column count.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map(|m| m.cols).ok_or(AttentionError::ZeroColumns)?;
        if parts.iter().any(|m| m.cols != cols) {
            return Err(AttentionError::Dimension("vstack column counts differ".into()));
        }
        Ok(Matrix {
            rows: parts.iter().map(|m| m.rows).sum(),
            cols,
            data: parts.iter().flat_map(|m| m.data.iter().copied()).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `scale * self * other^T`.
    fn scaled_gram(&self, other: &Matrix, scale: f64) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let q = self.row(i);
            for j in 0..other.rows {
                let dot: f64 = q.iter().zip(other.row(j)).map(|(a, b)| a * b).sum();
                out.data[i * other.rows + j] = scale * dot;
            }
        }
        out
    }
}

/// Attention over one key segment before normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialResult {
    /// Sum of `exp(logit - m) * v` per query row.
    pub o: Matrix,
    /// Per-row max logit; `-inf` for an empty segment.
    pub m: Vec<f64>,
    /// Per-row sum of `exp(logit - m)`; zero for an empty segment.
    pub l: Vec<f64>,
}

impl PartialResult {
    /// The merge identity: attention over no keys.
    pub fn empty(rows: usize, value_dim: usize) -> Self {
        Self {
            o: Matrix::zeros(rows, value_dim),
            m: vec![f64::NEG_INFINITY; rows],
            l: vec![0.0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> PartialResult {
        PartialResult {
            o: self.o.slice_rows(start, end),
            m: self.m[start..end].to_vec(),
            l: self.l[start..end].to_vec(),
        }
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if scale.is_finite() && scale >= 0.0 {
        Ok(())
    } else {
        Err(AttentionError::BadScale(scale))
    }
}

fn check_qkv(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols != k.cols {
        return Err(AttentionError::Dimension(format!(
            "query dim {} vs key dim {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(AttentionError::Dimension(format!(
            "{} keys vs {} values",
            k.rows, v.rows
        )));
    }
    Ok(())
}

pub fn partial_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64) -> Result<PartialResult> {
    check_qkv(q, k, v)?;
    check_scale(scale)?;
    partial_from_logits(&q.scaled_gram(k, scale), v)
}

/// Partial result from precomputed logits (`n x L`) and values (`L x dv`).
pub fn partial_from_logits(logits: &Matrix, v: &Matrix) -> Result<PartialResult> {
    if logits.cols != v.rows && !(v.rows == 0 && logits.data.is_empty()) {
        return Err(AttentionError::Dimension(format!(
            "{} logit columns vs {} values",
            logits.cols, v.rows
        )));
    }
    let n = logits.rows;
    let mut out = PartialResult::empty(n, v.cols);
    if v.rows == 0 {
        return Ok(out);
    }
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out.o.data[i * v.cols..(i + 1) * v.cols];
        let mut l = 0.0;
        for (j, &x) in row.iter().enumerate() {
            let w = (x - m).exp();
            l += w;
            for (acc, &vv) in o.iter_mut().zip(v.row(j)) {
                *acc += w * vv;
            }
        }
        out.m[i] = m;
        out.l[i] = l;
    }
    Ok(out)
}

fn rescale(m: f64, to: f64) -> f64 {
    if m == f64::NEG_INFINITY {
        0.0
    } else {
        (m - to).exp()
    }
}

/// Online-softmax combination of two partials over disjoint key segments.
pub fn merge(a: &PartialResult, b: &PartialResult) -> Result<PartialResult> {
    if a.rows() != b.rows() || a.o.cols != b.o.cols {
        return Err(AttentionError::Dimension(format!(
            "merging {}x{} with {}x{}",
            a.rows(),
            a.o.cols,
            b.rows(),
            b.o.cols
        )));
    }
    let d = a.o.cols;
    let mut out = PartialResult::empty(a.rows(), d);
    for i in 0..a.rows() {
        let m = a.m[i].max(b.m[i]);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let (wa, wb) = (rescale(a.m[i], m), rescale(b.m[i], m));
        out.m[i] = m;
        out.l[i] = a.l[i] * wa + b.l[i] * wb;
        let (oa, ob) = (a.o.row(i), b.o.row(i));
        for (j, o) in out.o.data[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = oa[j] * wa + ob[j] * wb;
        }
    }
    Ok(out)
}

/// Normalized attention output. Fails if some row saw no keys.
pub fn finalize(p: &PartialResult) -> Result<Matrix> {
    let d = p.o.cols;
    let mut out = p.o.clone();
    for (i, &l) in p.l.iter().enumerate() {
        if l <= 0.0 {
            return Err(AttentionError::EmptySegment(i));
        }
        for x in &mut out.data[i * d..(i + 1) * d] {
            *x /= l;
        }
    }
    Ok(out)
}

/// Row-wise softmax of `logits`.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..logits.rows {
        let row = &mut out.data[i * logits.cols..(i + 1) * logits.cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Dense `softmax(scale * Q K^T) V`.
pub fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64) -> Result<Matrix> {
    check_qkv(q, k, v)?;
    check_scale(scale)?;
    if k.rows == 0 {
        return Err(AttentionError::EmptySegment(0));
    }
    let w = softmax_rows(&q.scaled_gram(k, scale));
    let mut out = Matrix::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        let o = &mut out.data[i * v.cols..(i + 1) * v.cols];
        for (j, &wij) in w.row(i).iter().enumerate() {
            for (acc, &vv) in o.iter_mut().zip(v.row(j)) {
                *acc += wij * vv;
            }
        }
    }
    Ok(out)
}

/// Keys and values of one group: a shared prefix and one distinct segment
/// per request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedKV {
    pub prefix_k: Matrix,
    pub prefix_v: Matrix,
    pub distinct: Vec<(Matrix, Matrix)>,
}

/// Per-request attention outputs for a prefix-sharing group. `queries[r]`
/// holds request `r`'s query rows.
pub fn prefix_shared_attention(queries: &[Matrix], seg: &SegmentedKV, scale: f64) -> Result<Vec<Matrix>> {
    if queries.len() != seg.distinct.len() {
        return Err(AttentionError::Dimension(format!(
            "{} query sets vs {} distinct segments",
            queries.len(),
            seg.distinct.len()
        )));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let stacked = Matrix::vstack(&queries.iter().collect::<Vec<_>>())?;
    let prefix = partial_attention(&stacked, &seg.prefix_k, &seg.prefix_v, scale)?;
    let mut start = 0;
    let mut outs = Vec::with_capacity(queries.len());
    for (r, (q, (k, v))) in queries.iter().zip(&seg.distinct).enumerate() {
        if seg.prefix_k.rows == 0 && k.rows == 0 {
            return Err(AttentionError::EmptySegment(r));
        }
        let shared = prefix.slice_rows(start, start + q.rows);
        start += q.rows;
        let own = partial_attention(q, k, v, scale)?;
        outs.push(finalize(&merge(&shared, &own)?)?);
    }
    Ok(outs)
}

/// Worst-case errors of the segmented computation against the dense oracle
/// over random instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTestReport {
    pub seed: u64,
    pub instances: usize,
    /// Two-way split, merged and finalized, vs naive.
    pub max_err_two_way: f64,
    /// Largest disagreement between merge orders of a three-way split.
    pub max_err_three_way: f64,
    /// Merging with an empty segment vs the plain partial.
    pub max_err_identity: f64,
    /// Group evaluation vs per-request naive.
    pub max_err_group: f64,
    pub tolerance: f64,
    pub identity_tolerance: f64,
    pub passed: bool,
}

pub const SELFTEST_TOLERANCE: f64 = 1e-10;
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

/// Random instances with `n <= 64` queries, `L <= 512` keys, `d <= 64` and
/// entries in `[-10, 10]`.
pub fn selftest(seed: u64, instances: usize) -> SelfTestReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SelfTestReport {
        seed,
        instances,
        max_err_two_way: 0.0,
        max_err_three_way: 0.0,
        max_err_identity: 0.0,
        max_err_group: 0.0,
        tolerance: SELFTEST_TOLERANCE,
        identity_tolerance: IDENTITY_TOLERANCE,
        passed: false,
    };
    for _ in 0..instances {
        let n = rng.random_range(1..=64);
        let len = rng.random_range(3..=512);
        let d = rng.random_range(1..=64);
        let scale = 1.0 / (d as f64).sqrt();
        let q = Matrix::random(&mut rng, n, d, 10.0);
        let k = Matrix::random(&mut rng, len, d, 10.0);
        let v = Matrix::random(&mut rng, len, d, 10.0);
        let want = naive_attention(&q, &k, &v, scale).expect("shapes are consistent");

        let part = |a: usize, b: usize| {
            partial_attention(&q, &k.slice_rows(a, b), &v.slice_rows(a, b), scale).expect("shapes")
        };
        let fin = |p: &PartialResult| finalize(p).expect("non-empty");
        let mrg = |a: &PartialResult, b: &PartialResult| merge(a, b).expect("shapes");

        let cut = rng.random_range(1..len);
        let two = fin(&mrg(&part(0, cut), &part(cut, len)));
        r.max_err_two_way = r.max_err_two_way.max(two.max_abs_diff(&want));

        let c1 = rng.random_range(1..len - 1);
        let c2 = rng.random_range(c1 + 1..len);
        let (a, b, c) = (part(0, c1), part(c1, c2), part(c2, len));
        let left = fin(&mrg(&mrg(&a, &b), &c));
        let right = fin(&mrg(&a, &mrg(&b, &c)));
        let outer = fin(&mrg(&mrg(&a, &c), &b));
        r.max_err_three_way = r
            .max_err_three_way
            .max(left.max_abs_diff(&right))
            .max(left.max_abs_diff(&outer))
            .max(left.max_abs_diff(&want));

        let whole = part(0, len);
        let empty = PartialResult::empty(n, d);
        r.max_err_identity = r
            .max_err_identity
            .max(fin(&mrg(&whole, &empty)).max_abs_diff(&fin(&whole)))
            .max(fin(&mrg(&empty, &whole)).max_abs_diff(&fin(&whole)));

        // the same keys as one group: prefix = first segment, each request
        // gets its own distinct tail
        let members = rng.random_range(1..=4);
        let queries: Vec<_> = (0..members)
            .map(|_| {
                let rows = rng.random_range(1..=16);
                Matrix::random(&mut rng, rows, d, 10.0)
            })
            .collect();
        let distinct: Vec<_> = (0..members)
            .map(|_| {
                let l = rng.random_range(0..=64);
                (Matrix::random(&mut rng, l, d, 10.0), Matrix::random(&mut rng, l, d, 10.0))
            })
            .collect();
        let seg = SegmentedKV {
            prefix_k: k.slice_rows(0, cut),
            prefix_v: v.slice_rows(0, cut),
            distinct,
        };
        let outs = prefix_shared_attention(&queries, &seg, scale).expect("prefix non-empty");
        for ((qr, (dk, dv)), out) in queries.iter().zip(&seg.distinct).zip(&outs) {
            let full_k = Matrix::vstack(&[&seg.prefix_k, dk]).expect("same dim");
            let full_v = Matrix::vstack(&[&seg.prefix_v, dv]).expect("same dim");
            let want = naive_attention(qr, &full_k, &full_v, scale).expect("shapes");
            r.max_err_group = r.max_err_group.max(out.max_abs_diff(&want));
        }
    }
    r.passed = r.max_err_two_way <= r.tolerance
        && r.max_err_three_way <= r.tolerance
        && r.max_err_group <= r.tolerance
        && r.max_err_identity <= r.identity_tolerance;
    r
}
