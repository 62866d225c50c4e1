//! Python bindings: scenarios, the simulator, reports, sweeps and the AMM
//! and signature primitives.

use std::borrow::Cow;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mercury_core::amm::{self, FeeShare};
use mercury_core::crypto::{self, PublicKey};
use mercury_core::harness::{self, suite, Axis};
use mercury_core::htlc::Preimage;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(module = "mercury", from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: harness::Scenario,
}

#[pymethods]
impl Scenario {
    /// One client with `deposits` deposits and no faults.
    #[new]
    #[pyo3(signature = (name = "scenario", operators = 3, deposits = 1))]
    fn new(name: &str, operators: usize, deposits: usize) -> Self {
        Scenario { inner: harness::Scenario::simple(name, operators, deposits) }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        harness::Scenario::from_toml(text).map(|inner| Scenario { inner }).map_err(value_err)
    }

    /// A bundled scenario: happy-path, all-suspended, f-crashed, amortization,
    /// checkpoint, htlc, or `random:<seed>`.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        let inner = match name {
            "happy-path" => suite::happy_path(),
            "all-suspended" => suite::all_suspended(),
            "f-crashed" => suite::f_crashed(3, 3),
            "amortization" => suite::amortization(),
            "checkpoint" => suite::checkpoint(),
            "htlc" => suite::htlc_swap(None),
            other => match other.strip_prefix("random:").and_then(|s| s.parse().ok()) {
                Some(seed) => suite::randomized_seed(seed),
                None => return Err(PyKeyError::new_err(name.to_string())),
            },
        };
        Ok(Scenario { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn operators(&self) -> usize {
        self.inner.operators
    }

    #[setter]
    fn set_operators(&mut self, n: usize) {
        self.inner.operators = n;
    }

    #[getter]
    fn tau_c(&self) -> u64 {
        self.inner.timing.tau_c()
    }

    #[getter]
    fn tau_w(&self) -> u64 {
        self.inner.timing.tau_w()
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?}, operators={}, seed={})", self.inner.name, self.inner.operators, self.inner.seed)
    }
}

#[pyclass(module = "mercury", frozen)]
struct Report {
    inner: harness::RunReport,
}

#[pymethods]
impl Report {
    #[getter]
    fn passed(&self) -> bool {
        self.inner.passed()
    }

    #[getter]
    fn quiescent(&self) -> bool {
        self.inner.quiescent
    }

    #[getter]
    fn ticks(&self) -> u64 {
        self.inner.ticks
    }

    /// `(deposit id hex, outcome)` pairs.
    fn outcomes(&self) -> Vec<(String, String)> {
        self.inner
            .deposits
            .iter()
            .map(|d| (d.id.to_hex(), serde_json::to_value(d.outcome).unwrap().as_str().unwrap_or_default().to_string()))
            .collect()
    }

    /// Failed property names.
    fn failures(&self) -> Vec<String> {
        self.inner.failures().into_iter().map(|p| p.property.clone()).collect()
    }

    fn to_json_lines(&self) -> String {
        self.inner.to_json_lines()
    }

    fn to_table(&self) -> String {
        self.inner.to_table()
    }

    /// The whole report as Python dicts and lists.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_loads(py, &serde_json::to_string(&self.inner).map_err(value_err)?)
    }
}

/// A running simulation that can be stepped tick by tick.
#[pyclass(module = "mercury", unsendable)]
struct World {
    inner: harness::World,
}

#[pymethods]
impl World {
    #[new]
    fn new(scenario: &Scenario) -> PyResult<Self> {
        harness::World::new(scenario.inner.clone()).map(|inner| World { inner }).map_err(value_err)
    }

    fn step(&mut self) {
        self.inner.step();
    }

    fn run_to_end(&mut self) {
        self.inner.run_to_end();
    }

    #[getter]
    fn now(&self) -> u64 {
        self.inner.now()
    }

    #[getter]
    fn quiescent(&self) -> bool {
        self.inner.is_quiescent()
    }

    #[getter]
    fn leader(&self) -> Option<usize> {
        self.inner.leader()
    }

    #[getter]
    fn aborted(&self) -> Option<String> {
        self.inner.aborted().map(str::to_string)
    }

    /// Both chains' event logs, one JSON object per line.
    fn export_events(&self) -> String {
        self.inner.export_events()
    }

    fn report(&self) -> Report {
        Report { inner: self.inner.report() }
    }
}

/// Runs a scenario to completion.
#[pyfunction]
fn run(py: Python<'_>, scenario: &Scenario) -> PyResult<Report> {
    let s = scenario.inner.clone();
    py.detach(|| harness::run(s)).map(|inner| Report { inner }).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs `scenario` once per value of `axis` and returns the amortization
/// rows as dicts.
#[pyfunction]
fn sweep<'py>(py: Python<'py>, scenario: &Scenario, axis: &str, values: Vec<u64>) -> PyResult<Bound<'py, PyAny>> {
    let axis: Axis = axis.parse().map_err(value_err)?;
    let s = scenario.inner.clone();
    let result = py.detach(|| harness::sweep(&s, axis, &values)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_loads(py, &serde_json::to_string(&result.rows()).map_err(value_err)?)
}

/// Constant-product output for `dx` sold into `(in_reserve, out_reserve)`.
#[pyfunction]
fn quote(in_reserve: u64, out_reserve: u64, dx: u64) -> PyResult<u64> {
    amm::quote(in_reserve, out_reserve, dx).map_err(value_err)
}

#[pyclass(module = "mercury")]
struct Pool {
    inner: amm::Pool,
}

#[pymethods]
impl Pool {
    #[new]
    #[pyo3(signature = (reserve_x, reserve_y, fee_per_tx = 0, fee_share = "1/2"))]
    fn new(reserve_x: u64, reserve_y: u64, fee_per_tx: u64, fee_share: &str) -> PyResult<Self> {
        let share: FeeShare = fee_share.parse().map_err(value_err)?;
        let mut inner = amm::Pool::new(share, fee_per_tx);
        inner
            .add_liquidity(mercury_core::types::Address::named("python-lp"), reserve_x, reserve_y)
            .map_err(value_err)?;
        Ok(Pool { inner })
    }

    #[getter]
    fn reserves(&self) -> (u64, u64) {
        (self.inner.reserve_x, self.inner.reserve_y)
    }

    fn quote(&self, x: u64) -> PyResult<u64> {
        self.inner.quote(x).map_err(value_err)
    }

    fn exchange(&mut self, x: u64) -> PyResult<u64> {
        self.inner.exchange(x).map_err(value_err)
    }

    fn exchange_reverse(&mut self, y: u64) -> PyResult<u64> {
        self.inner.exchange_reverse(y).map_err(value_err)
    }
}

/// LP reward `floor(fee * r * lp / total)` with `r` given as "num/den".
#[pyfunction]
fn lp_reward(fee: u64, lp_liquidity: u64, total_liquidity: u64, fee_share: &str) -> PyResult<u64> {
    Ok(amm::lp_reward(fee, lp_liquidity, total_liquidity, fee_share.parse().map_err(value_err)?))
}

/// Per-signer operator reward `floor(fee * (1 - r) / signers)`.
#[pyfunction]
fn operator_reward(fee: u64, signers: usize, fee_share: &str) -> PyResult<u64> {
    if signers == 0 {
        return Err(PyValueError::new_err("signers must be positive"));
    }
    Ok(amm::operator_reward(fee, signers, fee_share.parse().map_err(value_err)?))
}

#[pyfunction]
fn hash(data: &[u8]) -> Cow<'static, [u8]> {
    Cow::Owned(crypto::hash(data).0.to_vec())
}

/// Hash lock of a 32-byte preimage.
#[pyfunction]
fn hash_lock(preimage: [u8; 32]) -> Cow<'static, [u8]> {
    Cow::Owned(Preimage(preimage).hash_lock().0.to_vec())
}

#[pyclass(module = "mercury")]
struct KeyPair {
    inner: crypto::KeyPair,
}

#[pymethods]
impl KeyPair {
    #[new]
    fn new(seed: &[u8]) -> Self {
        KeyPair { inner: crypto::KeyPair::from_seed(seed) }
    }

    #[getter]
    fn public_key(&self) -> u64 {
        self.inner.public_key.0
    }

    /// Serialized signature bytes.
    fn sign(&self, message: &[u8]) -> PyResult<Cow<'static, [u8]>> {
        let sig = self.inner.sign(message);
        Ok(Cow::Owned(serde_json::to_vec(&sig).map_err(value_err)?))
    }
}

/// Checks a signature produced by `KeyPair.sign`.
#[pyfunction]
fn verify(message: &[u8], signature: &[u8], public_key: u64) -> bool {
    match serde_json::from_slice::<crypto::Signature>(signature) {
        Ok(sig) => crypto::verify(message, &sig, &PublicKey(public_key)),
        Err(_) => false,
    }
}

#[pymodule]
fn mercury(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Report>()?;
    m.add_class::<World>()?;
    m.add_class::<Pool>()?;
    m.add_class::<KeyPair>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(quote, m)?)?;
    m.add_function(wrap_pyfunction!(lp_reward, m)?)?;
    m.add_function(wrap_pyfunction!(operator_reward, m)?)?;
    m.add_function(wrap_pyfunction!(hash, m)?)?;
    m.add_function(wrap_pyfunction!(hash_lock, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
