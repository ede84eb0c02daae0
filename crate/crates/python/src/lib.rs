//! Python bindings: potentials, single chains, certificates and the
//! experiment runner behind the `kmc` command.

use std::sync::Mutex;

use kmc_core::certify::{dissipation_rate, RateInputs};
use kmc_core::chain::{run_trajectory, transition, ChainParams, Observable, RefreshPlacement, RngStream};
use kmc_core::cli::{parse_config, prepare, ExperimentKind, PotentialSpec};
use kmc_core::{KmcError, PhaseState, SharedPotential};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(kmc, KmcException, PyException);
create_exception!(kmc, ConfigError, KmcException);
create_exception!(kmc, NumericalAssertionError, KmcException);

fn to_py(e: KmcError) -> PyErr {
    match e {
        KmcError::Config(_) => ConfigError::new_err(e.to_string()),
        KmcError::Assertion(_) => NumericalAssertionError::new_err(e.to_string()),
        _ => KmcException::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    ConfigError::new_err(e.to_string())
}

/// A builtin potential described by the same JSON object the CLI accepts,
/// e.g. `{"kind": "double_well", "scale": 1.0}`.
#[pyclass(name = "Potential", frozen)]
struct PyPotential {
    inner: SharedPotential,
}

#[pymethods]
impl PyPotential {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        let spec: PotentialSpec = serde_json::from_str(spec).map_err(json_err)?;
        Ok(Self { inner: spec.build().map_err(to_py)? })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name()
    }

    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.inner.value(&x))
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        let mut g = vec![0.0; x.len()];
        self.inner.gradient(&x, &mut g);
        Ok(g)
    }

    /// `(L, L_H)`.
    fn smoothness(&self) -> (f64, f64) {
        let s = self.inner.smoothness();
        (s.l, s.l_h)
    }
}

impl PyPotential {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.inner.dim() {
            return Err(to_py(KmcError::DimensionMismatch { expected: self.inner.dim(), got: x.len() }));
        }
        Ok(())
    }
}

fn placement(name: &str) -> PyResult<RefreshPlacement> {
    serde_json::from_value(serde_json::Value::String(name.into())).map_err(json_err)
}

/// One chain with its own random stream.
#[pyclass(name = "Chain")]
struct PyChain {
    potential: SharedPotential,
    params: ChainParams,
    rng: Mutex<RngStream>,
}

#[pymethods]
impl PyChain {
    #[new]
    #[pyo3(signature = (potential, t, eta, seed=0, placement="refresh_then_flow"))]
    fn new(potential: &PyPotential, t: f64, eta: f64, seed: u64, placement: &str) -> PyResult<Self> {
        let params = ChainParams::new(t, eta).map_err(to_py)?.with_placement(self::placement(placement)?);
        params.check_step(potential.inner.smoothness().l).map_err(to_py)?;
        Ok(Self { potential: potential.inner.clone(), params, rng: Mutex::new(RngStream::new(seed)) })
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.params.gamma()
    }

    /// One transition from `(x, v)`; returns the new `(x, v)`.
    fn step(&self, py: Python<'_>, x: Vec<f64>, v: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let z = PhaseState::new(x, v).map_err(to_py)?;
        let next = py.detach(|| {
            let mut rng = self.rng.lock().expect("rng lock poisoned");
            transition(self.potential.as_ref(), &self.params, &z, &mut rng)
        });
        let next = next.map_err(to_py)?;
        Ok((next.x, next.v))
    }

    /// `n_steps` transitions; returns `(columns, rows)` with row `k` holding
    /// `x…, v…, U, |x|²` after `k` transitions.
    fn run(&self, py: Python<'_>, x: Vec<f64>, v: Vec<f64>, n_steps: usize) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let z = PhaseState::new(x, v).map_err(to_py)?;
        let traj = py.detach(|| {
            let mut rng = self.rng.lock().expect("rng lock poisoned");
            run_trajectory(self.potential.as_ref(), &self.params, &z, n_steps, &mut rng, &Observable::standard())
        });
        let traj = traj.map_err(to_py)?;
        Ok((traj.columns, traj.rows))
    }
}

/// Certified modified-entropy dissipation rate; inputs at curvature `l` are
/// rescaled to unit curvature first.
#[pyfunction]
#[pyo3(signature = (t, eta, a, c_ls, l=1.0, l_h=0.0))]
fn certify<'py>(py: Python<'py>, t: f64, eta: f64, a: f64, c_ls: f64, l: f64, l_h: f64) -> PyResult<Bound<'py, PyDict>> {
    let cert = dissipation_rate(&RateInputs { t, eta, a, c_ls, l, l_h }).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("rho", cert.rho)?;
    d.set_item("rate", cert.rate())?;
    d.set_item("m1", cert.m1)?;
    d.set_item("m2", cert.m2)?;
    d.set_item("m3", cert.m3)?;
    d.set_item("contraction_factor", cert.contraction_factor)?;
    d.set_item("valid", cert.valid)?;
    d.set_item("step_admissible", cert.step_admissible)?;
    d.set_item("t_unit", cert.inputs.t)?;
    d.set_item("gamma_unit", cert.inputs.gamma())?;
    Ok(d)
}

/// Run one CLI experiment from a JSON config without touching the disk.
/// Returns a dict with `header`, `rows`, `text`, `summary` (JSON string) and
/// `assertion` (message or `None`). Invalid configs raise `ConfigError`.
#[pyfunction]
#[pyo3(signature = (kind, config, seed=None))]
fn run_experiment<'py>(py: Python<'py>, kind: &str, config: &str, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let kind: ExperimentKind = serde_json::from_value(serde_json::Value::String(kind.into())).map_err(json_err)?;
    let cfg = parse_config(config, kind).map_err(to_py)?;
    let job = prepare(&cfg, kind).map_err(to_py)?;
    let seed = seed.unwrap_or(cfg.seed);
    let outcome = py.detach(|| job.execute(seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("header", outcome.table.header)?;
    d.set_item("rows", outcome.table.rows)?;
    d.set_item("text", outcome.text)?;
    d.set_item("summary", outcome.summary.to_string())?;
    d.set_item("assertion", outcome.assertion)?;
    Ok(d)
}

#[pymodule]
fn kmc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPotential>()?;
    m.add_class::<PyChain>()?;
    m.add_function(wrap_pyfunction!(certify, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("KmcException", m.py().get_type::<KmcException>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("NumericalAssertionError", m.py().get_type::<NumericalAssertionError>())?;
    Ok(())
}
