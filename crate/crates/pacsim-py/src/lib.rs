use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pacsim::harness::{self, CollisionMode, Corpus};
use pacsim::ir::{self, OptFlags};
use pacsim::sealcodec::{self, PacKey, SealedWord, DEFAULT_KEY};
use pacsim::{MetadataEntry, RunConfig, Tool};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn key_of(key: Option<u64>) -> PacKey {
    PacKey(key.unwrap_or(DEFAULT_KEY))
}

fn tool_of(tool: &str) -> PyResult<Tool> {
    tool.parse().map_err(value_err)
}

#[pyfunction]
fn default_key() -> u64 {
    DEFAULT_KEY
}

#[pyfunction]
fn pac24(key: u64, value: u64, modifier: u64) -> u32 {
    sealcodec::pac24(PacKey(key), value, modifier)
}

#[pyfunction]
fn bm32(key: u64, counter: u64, site_constant: u64) -> u32 {
    sealcodec::bm32(PacKey(key), counter, site_constant)
}

#[pyfunction]
fn modifier(birthmark: u32, size: u32) -> u64 {
    sealcodec::modifier(birthmark, size)
}

#[pyfunction]
fn encode(addr: u64, seal: u32) -> PyResult<u64> {
    SealedWord::encode(addr, seal).map(SealedWord::raw).map_err(value_err)
}

#[pyfunction]
fn strip(word: u64) -> u64 {
    SealedWord::from_raw(word).strip()
}

#[pyfunction]
fn extract_seal(word: u64) -> u32 {
    SealedWord::from_raw(word).seal()
}

/// A parsed .pir program.
#[pyclass(name = "Program", skip_from_py_object)]
#[derive(Clone)]
struct PyProgram {
    inner: ir::Program,
}

#[pymethods]
impl PyProgram {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        ir::parse(text).map(|inner| PyProgram { inner }).map_err(value_err)
    }

    fn instrument(&self) -> PyResult<Self> {
        ir::instrument(&self.inner)
            .map(|inner| PyProgram { inner })
            .map_err(value_err)
    }

    /// Applies a comma-separated pass list such as "loop-inv,redundant".
    #[pyo3(signature = (opts = "", write_only = false))]
    fn optimize(&self, opts: &str, write_only: bool) -> PyResult<Self> {
        let mut flags = OptFlags::parse_list(opts).map_err(value_err)?;
        flags.write_only = write_only;
        Ok(PyProgram {
            inner: flags.apply(&self.inner),
        })
    }

    #[getter]
    fn check_count(&self) -> usize {
        self.inner.check_count()
    }

    /// Runs the program and returns the result document as JSON text.
    #[pyo3(signature = (tool = "pacsan", halt = true, write_only = false, key = None))]
    fn run(&self, tool: &str, halt: bool, write_only: bool, key: Option<u64>) -> PyResult<String> {
        let mut cfg = RunConfig {
            tool: tool_of(tool)?,
            halt_on_first: halt,
            ..RunConfig::default()
        };
        cfg.checker.write_only = write_only;
        pacsim::run(&self.inner, cfg, key_of(key))
            .map(|r| r.to_json())
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Program(<{} functions, {} checks>)", self.inner.functions.len(), self.inner.check_count())
    }
}

#[pyclass(name = "MetadataTable")]
#[derive(Default)]
struct PyMetadataTable {
    inner: pacsim::MetadataTable,
}

#[pymethods]
impl PyMetadataTable {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// Returns `(seal, birthmark)` for a fresh entry.
    fn create(&mut self, key: u64, base: u64, size: u32, counter: u64, site_constant: u64) -> PyResult<(u32, u32)> {
        self.inner
            .create_metadata(PacKey(key), base, size, counter, site_constant)
            .map_err(value_err)
    }

    /// Returns `(base, birthmark, size)`, or None for an empty slot.
    fn lookup(&self, seal: u32) -> Option<(u64, u32, u32)> {
        let e: MetadataEntry = self.inner.lookup(seal);
        (!e.is_empty()).then(|| (e.base(), e.birthmark, e.size))
    }

    fn clear(&mut self, seal: u32) -> PyResult<()> {
        self.inner.clear(seal).map_err(value_err)
    }

    fn verify(&self, key: u64) -> bool {
        self.inner.verify(PacKey(key)).is_ok()
    }

    fn __len__(&self) -> usize {
        self.inner.live_count()
    }
}

/// Returns `(id, cwe, variant, program_text)` tuples.
#[pyfunction]
fn gen_corpus(seed: u64, per_cwe: usize) -> PyResult<Vec<(String, String, String, String)>> {
    if per_cwe == 0 {
        return Err(value_err("per_cwe must be at least 1"));
    }
    Ok(harness::gen_corpus(seed, per_cwe)
        .into_iter()
        .map(|c| {
            let variant = match c.variant {
                harness::Variant::Good => "good",
                harness::Variant::Bad => "bad",
            };
            (c.id, c.cwe.as_str().to_string(), variant.to_string(), c.program.to_string())
        })
        .collect())
}

#[pyfunction]
fn write_corpus(seed: u64, per_cwe: usize, out: PathBuf) -> PyResult<usize> {
    if per_cwe == 0 {
        return Err(value_err("per_cwe must be at least 1"));
    }
    let c = Corpus::generate(seed, per_cwe);
    c.write_dir(&out).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(c.cases.len())
}

/// Scores a generated corpus and returns the report as JSON text.
#[pyfunction]
#[pyo3(signature = (seed, per_cwe, tool = "pacsan", opts = "", key = None))]
fn score(seed: u64, per_cwe: usize, tool: &str, opts: &str, key: Option<u64>) -> PyResult<String> {
    if per_cwe == 0 {
        return Err(value_err("per_cwe must be at least 1"));
    }
    let flags = OptFlags::parse_list(opts).map_err(value_err)?;
    let corpus = Corpus::generate(seed, per_cwe);
    harness::score(&corpus, tool_of(tool)?, flags, key_of(key))
        .map(|r| r.to_json())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Returns `(matches, empirical_rate)`.
#[pyfunction]
#[pyo3(signature = (trials, seed = 1, key = None, identical = false))]
fn collision_trial(py: Python<'_>, trials: u64, seed: u64, key: Option<u64>, identical: bool) -> (u64, f64) {
    let mode = if identical {
        CollisionMode::Identical
    } else {
        CollisionMode::Independent
    };
    let r = py.detach(|| harness::collision_trial(key_of(key), trials, seed, mode));
    (r.matches, r.rate())
}

#[pymodule]
fn pacsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(default_key, m)?)?;
    m.add_function(wrap_pyfunction!(pac24, m)?)?;
    m.add_function(wrap_pyfunction!(bm32, m)?)?;
    m.add_function(wrap_pyfunction!(modifier, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(strip, m)?)?;
    m.add_function(wrap_pyfunction!(extract_seal, m)?)?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(write_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(collision_trial, m)?)?;
    m.add_class::<PyProgram>()?;
    m.add_class::<PyMetadataTable>()?;
    Ok(())
}
