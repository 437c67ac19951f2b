//! Saving ratios, batch-size "valley" statistics and policy comparison
//! reports computed from simulation traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{IterationTrace, Policy, SimulationTrace};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("trace has no logical prefill tokens")]
    NoLogicalTokens,
    #[error("valley alpha must be in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("report needs at least one trace")]
    NoTraces,
    #[error("trace `{label}` comes from a different workload ({got} vs {expected})")]
    WorkloadMismatch {
        label: String,
        got: String,
        expected: String,
    },
}

/// An iteration is a valley when its batch holds fewer than
/// `alpha * chunk_size` tokens. The 0.5 default is a convention of this
/// crate, not a measured quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValleyConfig {
    pub alpha: f64,
}

impl Default for ValleyConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl ValleyConfig {
    pub fn new(alpha: f64) -> Result<Self, MetricsError> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Self { alpha })
        } else {
            Err(MetricsError::InvalidAlpha(alpha))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValleyStats {
    /// Over every iteration.
    pub with_tail: f64,
    /// Excluding the decode-only drain after the last prefill iteration.
    pub steady: f64,
}

/// `1 - processed / logical` prefill tokens.
pub fn saving_ratio(trace: &SimulationTrace) -> Result<f64, MetricsError> {
    ratio(trace.n_processed_prefill_tokens, trace.n_logical_prefill_tokens)
}

fn ratio(processed: u64, logical: u64) -> Result<f64, MetricsError> {
    if logical == 0 {
        return Err(MetricsError::NoLogicalTokens);
    }
    Ok(1.0 - processed as f64 / logical as f64)
}

/// Index one past the last iteration that carried prefill tokens.
fn steady_len(rows: &[IterationTrace]) -> usize {
    rows.iter().rposition(|r| r.prefill_tokens > 0).map_or(0, |i| i + 1)
}

pub fn valley_fraction(rows: &[IterationTrace], vc: ValleyConfig, chunk_size: usize) -> ValleyStats {
    let cutoff = vc.alpha * chunk_size as f64;
    let frac = |rows: &[IterationTrace]| {
        if rows.is_empty() {
            return 0.0;
        }
        let valleys = rows.iter().filter(|r| (r.total_tokens as f64) < cutoff).count();
        valleys as f64 / rows.len() as f64
    };
    ValleyStats {
        with_tail: frac(rows),
        steady: frac(&rows[..steady_len(rows)]),
    }
}

pub fn mean_tokens_per_iteration(rows: &[IterationTrace]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.total_tokens as f64).sum::<f64>() / rows.len() as f64
}

/// Per-trace summary; also the on-disk summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub policy: Policy,
    pub chunk_size: usize,
    pub n_requests: usize,
    pub workload_fingerprint: String,
    pub iterations: usize,
    pub n_processed_prefill_tokens: u64,
    pub n_logical_prefill_tokens: u64,
    pub saving_ratio: f64,
    pub mean_tokens_per_iteration: f64,
    /// Tail excluded.
    pub valley_fraction: f64,
    pub valley_fraction_with_tail: f64,
    /// Valley cutoff as a fraction of `chunk_size` (a reporting convention).
    pub valley_alpha: f64,
}

impl Summary {
    /// Rebuilds the trace a summary was computed from, given its rows.
    pub fn into_trace(self, iterations: Vec<IterationTrace>) -> SimulationTrace {
        SimulationTrace {
            policy: self.policy,
            chunk_size: self.chunk_size,
            n_requests: self.n_requests,
            workload_fingerprint: self.workload_fingerprint,
            n_processed_prefill_tokens: self.n_processed_prefill_tokens,
            n_logical_prefill_tokens: self.n_logical_prefill_tokens,
            iterations,
        }
    }
}

pub fn summarize(label: &str, trace: &SimulationTrace, vc: ValleyConfig) -> Result<Summary, MetricsError> {
    let valley = valley_fraction(&trace.iterations, vc, trace.chunk_size);
    Ok(Summary {
        label: label.to_owned(),
        policy: trace.policy,
        chunk_size: trace.chunk_size,
        n_requests: trace.n_requests,
        workload_fingerprint: trace.workload_fingerprint.clone(),
        iterations: trace.iterations.len(),
        n_processed_prefill_tokens: trace.n_processed_prefill_tokens,
        n_logical_prefill_tokens: trace.n_logical_prefill_tokens,
        saving_ratio: saving_ratio(trace)?,
        mean_tokens_per_iteration: mean_tokens_per_iteration(&trace.iterations),
        valley_fraction: valley.steady,
        valley_fraction_with_tail: valley.with_tail,
        valley_alpha: vc.alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summaries: Vec<Summary>,
    /// Side-by-side per-iteration token counts; only for two or more traces.
    pub paired_csv: Option<String>,
}

/// Summarizes each trace and, for several traces of the same workload, lays
/// their per-iteration token totals side by side. Shorter traces are padded
/// with empty cells.
pub fn report(traces: &[(&str, &SimulationTrace)], vc: ValleyConfig) -> Result<Report, MetricsError> {
    let (_, first) = traces.first().ok_or(MetricsError::NoTraces)?;
    for (label, t) in traces {
        if t.workload_fingerprint != first.workload_fingerprint
            || t.n_logical_prefill_tokens != first.n_logical_prefill_tokens
        {
            return Err(MetricsError::WorkloadMismatch {
                label: (*label).to_owned(),
                got: t.workload_fingerprint.clone(),
                expected: first.workload_fingerprint.clone(),
            });
        }
    }
    let summaries = traces
        .iter()
        .map(|(label, t)| summarize(label, t, vc))
        .collect::<Result<Vec<_>, _>>()?;
    if traces.len() < 2 {
        return Ok(Report {
            summaries,
            paired_csv: None,
        });
    }
    let rows = traces.iter().map(|(_, t)| t.iterations.len()).max().unwrap_or(0);
    let mut csv = String::from("iteration");
    for (label, _) in traces {
        csv.push(',');
        csv.push_str(label);
    }
    csv.push('\n');
    for i in 0..rows {
        csv.push_str(&i.to_string());
        for (_, t) in traces {
            csv.push(',');
            if let Some(r) = t.iterations.get(i) {
                csv.push_str(&r.total_tokens.to_string());
            }
        }
        csv.push('\n');
    }
    Ok(Report {
        summaries,
        paired_csv: Some(csv),
    })
}
