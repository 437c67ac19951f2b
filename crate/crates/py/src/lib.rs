//! Python bindings: workload generation, planning, simulation and the
//! attention reference. Matrices cross the boundary as lists of rows.

use prefixbatch::attention::{self, Matrix, SegmentedKV};
use prefixbatch::metrics::{summarize, ValleyConfig};
use prefixbatch::prefix_tree::{self, GroupMember, PrefixSharingGroup};
use prefixbatch::scheduler::{self, Policy, SchedulerConfig, SimInput, SimulationTrace};
use prefixbatch::workload::{self, IndustrySpec, Request, SyntheticSpec, TokenId};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py_json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Workload", module = "pyprefixbatch", skip_from_py_object)]
#[derive(Clone)]
struct PyWorkload {
    inner: workload::Workload,
}

#[pymethods]
impl PyWorkload {
    /// Builds a workload from `(id, tokens, output_len)` tuples.
    #[new]
    fn new(requests: Vec<(String, Vec<TokenId>, u32)>) -> PyResult<Self> {
        let requests = requests
            .into_iter()
            .map(|(id, tokens, out)| Request::new(id, tokens, out))
            .collect();
        let inner = workload::Workload::new(requests).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        let inner = workload::read_workload(path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        workload::write_workload(&self.inner, path).map_err(value_err)
    }

    fn requests(&self) -> Vec<(String, Vec<TokenId>, u32)> {
        self.inner
            .requests
            .iter()
            .map(|r| (r.id.clone(), r.tokens.clone(), r.output_len))
            .collect()
    }

    fn shuffled(&self, seed: u64) -> Self {
        Self {
            inner: workload::shuffle_workload(&self.inner, seed),
        }
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn logical_prefill_tokens(&self) -> u64 {
        self.inner.logical_prefill_tokens()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Workload({} requests)", self.inner.len())
    }
}

#[pyclass(name = "Group", module = "pyprefixbatch", get_all, from_py_object)]
#[derive(Clone)]
struct PyGroup {
    prefix: Vec<TokenId>,
    /// `(id, suffix, output_len)` per member.
    members: Vec<(String, Vec<TokenId>, u32)>,
}

#[pymethods]
impl PyGroup {
    #[new]
    fn new(prefix: Vec<TokenId>, members: Vec<(String, Vec<TokenId>, u32)>) -> Self {
        Self { prefix, members }
    }

    fn processed_tokens(&self) -> usize {
        self.to_core().processed_tokens()
    }

    fn logical_tokens(&self) -> usize {
        self.to_core().logical_tokens()
    }

    fn __repr__(&self) -> String {
        format!("Group(prefix_len={}, members={})", self.prefix.len(), self.members.len())
    }
}

impl PyGroup {
    fn to_core(&self) -> PrefixSharingGroup {
        PrefixSharingGroup {
            prefix: self.prefix.clone(),
            members: self
                .members
                .iter()
                .map(|(id, suffix, output_len)| GroupMember {
                    id: id.clone(),
                    suffix: suffix.clone(),
                    output_len: *output_len,
                })
                .collect(),
        }
    }

    fn from_core(g: PrefixSharingGroup) -> Self {
        Self {
            prefix: g.prefix,
            members: g.members.into_iter().map(|m| (m.id, m.suffix, m.output_len)).collect(),
        }
    }
}

fn core_groups(groups: &[PyGroup]) -> PyResult<Vec<PrefixSharingGroup>> {
    let gs: Vec<_> = groups.iter().map(PyGroup::to_core).collect();
    prefix_tree::validate_groups(&gs).map_err(value_err)?;
    Ok(gs)
}

#[pyclass(name = "Trace", module = "pyprefixbatch")]
struct PyTrace {
    inner: SimulationTrace,
}

#[pymethods]
impl PyTrace {
    /// `(iteration, total, decode, prefill, blocks_used, active)` per
    /// iteration.
    fn rows(&self) -> Vec<(usize, usize, usize, usize, usize, usize)> {
        self.inner
            .iterations
            .iter()
            .map(|r| {
                (
                    r.iteration,
                    r.total_tokens,
                    r.decode_tokens,
                    r.prefill_tokens,
                    r.blocks_used,
                    r.active_requests,
                )
            })
            .collect()
    }

    #[pyo3(signature = (valley_alpha = 0.5))]
    fn summary<'py>(&self, py: Python<'py>, valley_alpha: f64) -> PyResult<Bound<'py, PyAny>> {
        let vc = ValleyConfig::new(valley_alpha).map_err(value_err)?;
        let s = summarize(self.inner.policy.as_str(), &self.inner, vc).map_err(value_err)?;
        to_py_json(py, &s)
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv(path).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.iterations.len()
    }
}

#[pyfunction]
#[pyo3(signature = (prefix_len, distinct_len, sharing_degree, num_groups, output_len = 100, seed = 0))]
fn generate_microbenchmark(
    prefix_len: usize,
    distinct_len: usize,
    sharing_degree: usize,
    num_groups: usize,
    output_len: u32,
    seed: u64,
) -> PyResult<PyWorkload> {
    let spec = SyntheticSpec {
        prefix_len,
        distinct_len,
        sharing_degree,
        num_groups,
        output_len,
        seed,
    };
    let inner = workload::generate_microbenchmark(&spec).map_err(value_err)?;
    Ok(PyWorkload { inner })
}

#[pyfunction]
#[pyo3(signature = (num_requests = 8000, output_len = 100, seed = 0))]
fn generate_industry(num_requests: usize, output_len: u32, seed: u64) -> PyResult<PyWorkload> {
    let spec = IndustrySpec {
        num_requests,
        output_len,
        seed,
        ..IndustrySpec::default()
    };
    let inner = workload::generate_industry(&spec).map_err(value_err)?;
    Ok(PyWorkload { inner })
}

#[pyfunction]
fn plan(workload: &PyWorkload) -> Vec<PyGroup> {
    prefix_tree::plan(&workload.inner).into_iter().map(PyGroup::from_core).collect()
}

#[pyfunction]
fn saving_ratio_static(groups: Vec<PyGroup>) -> PyResult<f64> {
    Ok(prefix_tree::saving_ratio_static(&core_groups(&groups)?))
}

/// Runs the simulator. `batchllm` takes groups (a workload is planned
/// first); the fcfs policies take a workload (groups are flattened).
#[pyfunction]
#[pyo3(signature = (
    input,
    policy = "batchllm",
    chunk_size = 2048,
    block_size = 16,
    total_blocks = 32768,
    mem_threshold = None,
    request_cap = 256,
    lru_blocks = 8192,
    reorder = true,
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    input: &Bound<'_, PyAny>,
    policy: &str,
    chunk_size: usize,
    block_size: usize,
    total_blocks: usize,
    mem_threshold: Option<usize>,
    request_cap: usize,
    lru_blocks: usize,
    reorder: bool,
) -> PyResult<PyTrace> {
    let policy: Policy = policy.parse().map_err(value_err)?;
    let config = SchedulerConfig {
        chunk_size,
        block_size,
        total_blocks,
        mem_threshold,
        policy,
        request_cap,
        lru_blocks,
        reorder,
        max_new_groups_per_iter: None,
    };
    let (groups, wl) = if let Ok(w) = input.cast::<PyWorkload>() {
        let w = w.borrow().inner.clone();
        (prefix_tree::plan(&w), w)
    } else {
        let groups = core_groups(&input.extract::<Vec<PyGroup>>()?)?;
        let w = prefix_tree::groups_to_workload(&groups);
        (groups, w)
    };
    let sim_input = match policy {
        Policy::BatchLlm => SimInput::Groups(&groups),
        _ => SimInput::Workload(&wl),
    };
    let inner = scheduler::simulate(sim_input, config).map_err(value_err)?;
    Ok(PyTrace { inner })
}

fn matrix(rows: Vec<Vec<f64>>, cols_hint: usize) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, cols_hint.max(1)));
    }
    Matrix::from_rows(&rows).map_err(value_err)
}

fn first_cols(rows: &[Vec<f64>]) -> usize {
    rows.first().map_or(1, Vec::len)
}

/// Dense `softmax(scale * q k^T) v`.
#[pyfunction]
fn naive_attention(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>, scale: f64) -> PyResult<Vec<Vec<f64>>> {
    let (q, k, v) = (matrix(q, 1)?, matrix(k, 1)?, matrix(v, 1)?);
    Ok(attention::naive_attention(&q, &k, &v, scale).map_err(value_err)?.to_rows())
}

/// Attention for a group of requests over a shared prefix plus one distinct
/// segment each. `distinct` holds `(k, v)` per request; either may be empty.
#[pyfunction]
fn prefix_shared_attention(
    queries: Vec<Vec<Vec<f64>>>,
    prefix_k: Vec<Vec<f64>>,
    prefix_v: Vec<Vec<f64>>,
    distinct: Vec<(Rows, Rows)>,
    scale: f64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let d = queries.first().map_or(1, |q| first_cols(q));
    let dv = if prefix_v.is_empty() {
        distinct.iter().find(|(_, v)| !v.is_empty()).map_or(1, |(_, v)| first_cols(v))
    } else {
        first_cols(&prefix_v)
    };
    let queries = queries.into_iter().map(|q| matrix(q, d)).collect::<PyResult<Vec<_>>>()?;
    let seg = SegmentedKV {
        prefix_k: matrix(prefix_k, d)?,
        prefix_v: matrix(prefix_v, dv)?,
        distinct: distinct
            .into_iter()
            .map(|(k, v)| Ok((matrix(k, d)?, matrix(v, dv)?)))
            .collect::<PyResult<Vec<_>>>()?,
    };
    let outs = attention::prefix_shared_attention(&queries, &seg, scale).map_err(value_err)?;
    Ok(outs.iter().map(Matrix::to_rows).collect())
}

#[pyfunction]
#[pyo3(signature = (seed = 0, instances = 100))]
fn attention_selftest(py: Python<'_>, seed: u64, instances: usize) -> PyResult<Bound<'_, PyAny>> {
    to_py_json(py, &attention::selftest(seed, instances))
}

#[pymodule]
fn pyprefixbatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorkload>()?;
    m.add_class::<PyGroup>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(generate_microbenchmark, m)?)?;
    m.add_function(wrap_pyfunction!(generate_industry, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(saving_ratio_static, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(naive_attention, m)?)?;
    m.add_function(wrap_pyfunction!(prefix_shared_attention, m)?)?;
    m.add_function(wrap_pyfunction!(attention_selftest, m)?)?;
    Ok(())
}
