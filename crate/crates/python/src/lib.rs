//! Python module `elsa_sim`: configuration, the four experiment drivers and
//! the small closed-form helpers. Results come back as plain dicts and lists.

use std::path::PathBuf;

use elsa_core::codec::{gen_rotation as core_rotation, sketch_decode, sketch_encode, SketchParams};
use elsa_core::config::ExperimentConfig;
use elsa_core::fingerprint::{sym_kl_gaussian, Gaussian};
use elsa_core::metrics::bound::{theorem_bound as core_bound, BoundInputs};
use elsa_core::metrics::comm::{comm_cost as core_comm_cost, CommModel};
use elsa_core::protocol::{comm_sweep as core_comm_sweep, run_method, run_privacy, Method, Simulation};
use elsa_core::ElsaError;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList, PyString};
use serde::Serialize;
use serde_json::Value;

fn py_err(e: ElsaError) -> PyErr {
    match e {
        ElsaError::Config(_) | ElsaError::Usage(_) | ElsaError::Input(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, S: Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// A full experiment configuration. Unspecified keys take their defaults.
#[pyclass(name = "Config", module = "elsa_sim", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

impl PyConfig {
    /// Resolves the poisoned-client draw and validates, as the CLI does.
    fn prepared(&self) -> PyResult<ExperimentConfig> {
        let mut cfg = self.inner.clone();
        cfg.partition = cfg.partition.resolve(cfg.topology.n_clients, cfg.seed).map_err(py_err)?;
        cfg.validate().map_err(py_err)?;
        Ok(cfg)
    }
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => ExperimentConfig::from_toml(text).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
        Self::new(Some(&text))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, clients={}, edges={}, codec={:?})",
            self.inner.seed, self.inner.topology.n_clients, self.inner.topology.n_edges, self.inner.codec.mode
        )
    }
}

/// Trains with `method` ("elsa", "fedavg" or "fedavg-random") and returns the
/// round log and summary.
#[pyfunction]
#[pyo3(signature = (config, method = "elsa"))]
fn run<'py>(py: Python<'py>, config: &PyConfig, method: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.prepared()?;
    let method = Method::parse(method).map_err(py_err)?;
    let log = py.detach(|| run_method(&cfg, method)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("method", method.label())?;
    out.set_item("rounds", log.rounds())?;
    out.set_item("converged", log.converged)?;
    out.set_item("final_accuracy", log.final_accuracy())?;
    out.set_item("final_loss", log.final_loss())?;
    out.set_item("edge_weights", log.edge_weights.clone())?;
    out.set_item("records", serialize(py, &log.records)?)?;
    Ok(out.into_any())
}

/// Fingerprints every client and clusters them onto edge servers.
#[pyfunction]
fn cluster<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.prepared()?;
    let (fp, asg) = py
        .detach(|| {
            let sim = Simulation::new(&cfg)?;
            let fp = sim.fingerprints()?;
            let asg = sim.cluster(&fp)?;
            Ok::<_, ElsaError>((fp, asg))
        })
        .map_err(py_err)?;
    let n = fp.trust.len();
    let divergence: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| fp.divergence.get(i, j)).collect()).collect();
    let edges = PyList::empty(py);
    for e in &asg.edges {
        let d = PyDict::new(py);
        d.set_item("edge", e.edge)?;
        d.set_item("members", e.members.clone())?;
        d.set_item("groups", e.groups.clone())?;
        d.set_item("mean_trust", e.mean_trust)?;
        d.set_item("coherence", e.coherence)?;
        edges.append(d)?;
    }
    let excluded: Vec<(usize, &str)> = asg.excluded.iter().map(|&(c, e)| (c, e.label())).collect();
    let out = PyDict::new(py);
    out.set_item("gamma", cfg.clustering.effective_gamma(&fp.divergence))?;
    out.set_item("trust", fp.trust.clone())?;
    out.set_item("edge_of", asg.edge_of.clone())?;
    out.set_item("edges", edges)?;
    out.set_item("excluded", excluded)?;
    out.set_item("poisoned", cfg.partition.poisoned.clone())?;
    out.set_item("divergence", divergence)?;
    Ok(out.into_any())
}

/// Inversion-attack metrics for every channel mode, ratio and perturbation rank.
#[pyfunction]
fn privacy_eval<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.prepared()?;
    let reports = py.detach(|| run_privacy(&cfg)).map_err(py_err)?;
    serialize(py, &reports)
}

/// Predicted bytes and time per global round for each configured ratio.
#[pyfunction]
fn comm_sweep<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.prepared()?;
    let rows = core_comm_sweep(&cfg).map_err(py_err)?;
    serialize(py, &rows)
}

#[pyfunction]
fn theorem_bound(smoothness: f64, gap: f64, sigma_local_sq: f64, sigma2_sq: f64, rounds: f64) -> PyResult<f64> {
    core_bound(&BoundInputs {
        smoothness,
        gap,
        sigma_local_sq,
        sigma2_sq,
        rounds,
    })
    .map_err(py_err)
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn comm_cost(
    zeta: f64,
    seq_len: f64,
    rho: f64,
    bandwidth: f64,
    lora_bytes: f64,
    n_edges: usize,
    batch_sizes: Vec<f64>,
    rounds: f64,
    hidden: f64,
) -> PyResult<f64> {
    let m = CommModel {
        zeta,
        seq_len,
        rho,
        bandwidth,
        lora_bytes,
    };
    m.validate().map_err(py_err)?;
    Ok(core_comm_cost(&m, n_edges, &batch_sizes, rounds, hidden))
}

/// Count-sketch encode followed by median decode of one vector.
#[pyfunction]
#[pyo3(signature = (values, rows, buckets, salt = "", client = 0, round = 0))]
fn sketch_roundtrip(values: Vec<f64>, rows: usize, buckets: usize, salt: &str, client: u64, round: u64) -> PyResult<Vec<f64>> {
    let params = SketchParams::new(rows, buckets, values.len(), salt.as_bytes(), client, round).map_err(py_err)?;
    let sk = sketch_encode(&values, &params).map_err(py_err)?;
    sketch_decode(&sk, &params).map_err(py_err)
}

/// The client's `r x r` orthogonal rotation, as a list of rows.
#[pyfunction]
fn gen_rotation(salt: &str, client: u64, r: usize) -> Vec<Vec<f64>> {
    let q = core_rotation(salt.as_bytes(), client, r);
    q.row_iter().map(|row| row.iter().copied().collect()).collect()
}

fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Gaussian> {
    let d = mean.len();
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("covariance must be {d}x{d}")));
    }
    Ok(Gaussian {
        mean: DVector::from_vec(mean),
        cov: DMatrix::from_fn(d, d, |i, j| cov[i][j]),
    })
}

/// Symmetric KL divergence between two Gaussians.
#[pyfunction]
fn sym_kl(mean_a: Vec<f64>, cov_a: Vec<Vec<f64>>, mean_b: Vec<f64>, cov_b: Vec<Vec<f64>>) -> PyResult<f64> {
    sym_kl_gaussian(&gaussian(mean_a, cov_a)?, &gaussian(mean_b, cov_b)?).map_err(py_err)
}

#[pymodule]
fn elsa_sim(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(cluster, m)?)?;
    m.add_function(wrap_pyfunction!(privacy_eval, m)?)?;
    m.add_function(wrap_pyfunction!(comm_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_bound, m)?)?;
    m.add_function(wrap_pyfunction!(comm_cost, m)?)?;
    m.add_function(wrap_pyfunction!(sketch_roundtrip, m)?)?;
    m.add_function(wrap_pyfunction!(gen_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(sym_kl, m)?)?;
    Ok(())
}
