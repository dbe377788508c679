//! Python bindings for the `slosim` simulator.
//!
//! Structured results (traces, reports) cross the boundary as JSON and come
//! out as plain dicts and lists.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use slosim::config::{ProfileSpec, RunConfig, TraceSource};
use slosim::kvc::Work;
use slosim::workload::{generate_trace as gen_trace, load_trace as read_trace, RequestSpec};
use slosim::{cost_model, policies, simulate as run_sim, Error, ModelProfile, PolicyConfig};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        2 => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn profile(preset: &str) -> PyResult<ModelProfile> {
    ProfileSpec {
        preset: Some(preset.to_string()),
        ..ProfileSpec::default()
    }
    .model()
    .map_err(py_err)
}

fn config(toml: Option<&str>) -> PyResult<RunConfig> {
    match toml {
        Some(text) => RunConfig::from_toml_str(text).map_err(py_err),
        None => Ok(RunConfig::default()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn trace_for(cfg: &RunConfig) -> PyResult<Vec<RequestSpec>> {
    match &cfg.trace {
        TraceSource::File { path } => read_trace(path),
        TraceSource::Generated(t) => gen_trace(t, &cfg.profile.model().map_err(py_err)?),
    }
    .map_err(py_err)
}

/// Floating-point operations of one transformer layer for a forward size.
#[pyfunction]
fn layer_ops(forward_size: u64, hidden_size: u64) -> u128 {
    cost_model::layer_ops(forward_size, hidden_size)
}

/// Seconds for one iteration of `forward_size` tokens.
#[pyfunction]
#[pyo3(signature = (forward_size, preset = "opt-13b"))]
fn iteration_time(forward_size: usize, preset: &str) -> PyResult<f64> {
    Ok(cost_model::iteration_time(forward_size, &profile(preset)?))
}

/// Seconds to prefill a prompt run alone in pivot-size chunks.
#[pyfunction]
#[pyo3(signature = (prompt_len, preset = "opt-13b"))]
fn prefill_latency(prompt_len: usize, preset: &str) -> PyResult<f64> {
    Ok(cost_model::prefill_latency(prompt_len, &profile(preset)?))
}

/// Token budget of an iteration whose tightest SLO is `slo` seconds.
#[pyfunction]
#[pyo3(signature = (slo, preset = "opt-13b", cap = None))]
fn token_budget(slo: f64, preset: &str, cap: Option<usize>) -> PyResult<usize> {
    Ok(policies::token_budget(slo, &profile(preset)?, cap))
}

/// Generates the trace described by a TOML run configuration.
#[pyfunction]
#[pyo3(signature = (config_toml = None))]
fn generate_trace<'py>(py: Python<'py>, config_toml: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &trace_for(&config(config_toml)?)?)
}

/// Reads a JSON-lines trace file.
#[pyfunction]
fn load_trace<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &read_trace(path).map_err(py_err)?)
}

/// Runs each policy on the configured trace and returns one metrics dict
/// per policy.
#[pyfunction]
#[pyo3(signature = (config_toml = None, policies = None, trace_path = None))]
fn simulate<'py>(
    py: Python<'py>,
    config_toml: Option<&str>,
    policies: Option<Vec<String>>,
    trace_path: Option<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = config(config_toml)?;
    if let Some(path) = trace_path {
        cfg.trace = TraceSource::File { path: path.into() };
    }
    let list = match policies {
        Some(names) => names
            .iter()
            .map(|n| {
                n.parse()
                    .map(PolicyConfig::new)
                    .map_err(PyValueError::new_err)
            })
            .collect::<PyResult<Vec<_>>>()?,
        None => cfg.policy_list(),
    };
    let trace = trace_for(&cfg)?;
    let model = cfg.profile.model().map_err(py_err)?;
    let reports = py
        .detach(|| {
            list.iter()
                .map(|p| run_sim(&trace, p, &model, &cfg.engine).map(|r| r.report))
                .collect::<slosim::Result<Vec<_>>>()
        })
        .map_err(py_err)?;
    to_py(py, &reports)
}

/// Paged KV-cache block pool.
#[pyclass(name = "BlockPool")]
struct PyBlockPool(slosim::BlockPool);

fn work(prompt_len: Option<usize>, first: bool) -> Work {
    match prompt_len {
        Some(len) => Work::PromptChunk { len, first },
        None => Work::Decode,
    }
}

#[pymethods]
impl PyBlockPool {
    #[new]
    #[pyo3(signature = (capacity_tokens, block_size = 32))]
    fn new(capacity_tokens: usize, block_size: usize) -> PyResult<Self> {
        if block_size == 0 {
            return Err(PyValueError::new_err("block_size must be positive"));
        }
        Ok(PyBlockPool(slosim::BlockPool::from_capacity_tokens(
            capacity_tokens,
            block_size,
        )))
    }

    #[getter]
    fn total_blocks(&self) -> usize {
        self.0.total_blocks()
    }

    #[getter]
    fn free_blocks(&self) -> usize {
        self.0.free_blocks()
    }

    #[getter]
    fn allocated_tokens(&self) -> usize {
        self.0.allocated_tokens()
    }

    /// Blocks needed to run a prompt chunk of `prompt_len` tokens, or a
    /// generation step when `prompt_len` is None.
    #[pyo3(signature = (request_id, prompt_len = None, first = false))]
    fn demand(&self, request_id: u64, prompt_len: Option<usize>, first: bool) -> PyResult<usize> {
        self.0
            .demand(request_id, work(prompt_len, first))
            .map(|d| d.blocks_needed)
            .map_err(py_err)
    }

    #[pyo3(signature = (request_id, prompt_len = None, first = false))]
    fn allocate(
        &mut self,
        request_id: u64,
        prompt_len: Option<usize>,
        first: bool,
    ) -> PyResult<()> {
        let w = work(prompt_len, first);
        let d = self.0.demand(request_id, w).map_err(py_err)?;
        self.0.allocate(request_id, w, d).map_err(py_err)
    }

    /// Frees a finished request; returns the blocks released.
    fn release(&mut self, request_id: u64) -> PyResult<usize> {
        self.0.release(request_id).map_err(py_err)
    }

    /// Swaps a request out; returns the tokens saved.
    fn preempt(&mut self, request_id: u64) -> PyResult<usize> {
        self.0.preempt(request_id).map_err(py_err)
    }

    /// Tokens saved for a swapped-out request.
    fn swapped_tokens(&self, request_id: u64) -> Option<usize> {
        self.0.swapped_tokens(request_id)
    }

    /// `(blocks_held, tokens_stored)` of a resident request.
    fn residency(&self, request_id: u64) -> Option<(usize, usize)> {
        self.0
            .residency(request_id)
            .map(|r| (r.blocks_held, r.tokens_stored))
    }
}

#[pymodule]
fn slosim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(layer_ops, m)?)?;
    m.add_function(wrap_pyfunction!(iteration_time, m)?)?;
    m.add_function(wrap_pyfunction!(prefill_latency, m)?)?;
    m.add_function(wrap_pyfunction!(token_budget, m)?)?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(load_trace, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_class::<PyBlockPool>()?;
    Ok(())
}
