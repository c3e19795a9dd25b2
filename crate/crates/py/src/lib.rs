//! Python bindings: graph generation, dynamics simulation, the full
//! experiment pipeline and zero-shot weight generation, exposed as the
//! `fnfm_py` extension module.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fnfm_core::container::Checkpoint;
use fnfm_core::dataset::load_dataset;
use fnfm_core::dynamics::{euler_integrate, sis_rhs, hill_rhs, StateDomain};
use fnfm_core::graph;
use fnfm_core::pipeline::{
    cmd_evaluate, cmd_export_latents, cmd_simulate, cmd_train_cfm, cmd_train_experts,
    cmd_train_vae, load_generative, ExperimentConfig,
};
use fnfm_core::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// An undirected simple graph with a normalized adjacency operator.
#[pyclass(name = "Graph", skip_from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: graph::Graph,
}

#[pymethods]
impl PyGraph {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    fn degree(&self, i: usize) -> usize {
        self.inner.degree(i)
    }

    fn is_connected(&self) -> bool {
        self.inner.is_connected()
    }

    fn spectral_radius(&self) -> PyResult<f64> {
        graph::spectral_radius(&self.inner).map_err(to_py)
    }

    fn adjacency(&self) -> Vec<f64> {
        self.inner.adjacency.clone()
    }

    fn edge_list(&self) -> String {
        graph::edge_list_text(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Graph(n={}, edges={})", self.inner.n, self.inner.edge_count())
    }
}

/// Barabasi-Albert preferential-attachment graph.
#[pyfunction]
fn generate_ba(n: usize, m: usize, seed: u64) -> PyResult<PyGraph> {
    Ok(PyGraph { inner: graph::generate_ba(n, m, seed).map_err(to_py)? })
}

/// Random k-regular graph.
#[pyfunction]
fn generate_regular(n: usize, k: usize, seed: u64) -> PyResult<PyGraph> {
    Ok(PyGraph { inner: graph::generate_regular(n, k, seed).map_err(to_py)? })
}

/// Forward-Euler SIS trajectory; returns `steps` rows of `n` node states.
#[pyfunction]
fn simulate_sis(
    g: &PyGraph,
    beta: f64,
    gamma: f64,
    x0: Vec<f64>,
    steps: usize,
    dt: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let graph = g.inner.clone();
    let (states, _) = euler_integrate(
        |x| sis_rhs(x, &graph, beta, gamma),
        &x0,
        dt,
        steps,
        StateDomain::UnitInterval,
    )
    .map_err(to_py)?;
    Ok(states.chunks(g.inner.n).map(|c| c.to_vec()).collect())
}

/// Forward-Euler Hill-dynamics trajectory.
#[pyfunction]
fn simulate_hill(
    g: &PyGraph,
    a: f64,
    h: f64,
    damping: f64,
    x0: Vec<f64>,
    steps: usize,
    dt: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let graph = g.inner.clone();
    let (states, _) = euler_integrate(
        |x| hill_rhs(x, &graph, a, h, damping),
        &x0,
        dt,
        steps,
        StateDomain::Unbounded,
    )
    .map_err(to_py)?;
    Ok(states.chunks(g.inner.n).map(|c| c.to_vec()).collect())
}

/// Experiment configuration; construct from a TOML file or defaults.
#[pyclass(name = "ExperimentConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => ExperimentConfig::load(&p).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        Ok(PyExperimentConfig { inner })
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
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) -> PyResult<()> {
        self.inner.seeds = seeds;
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(name={:?}, seed={}, out_dir={:?})",
            self.inner.name, self.inner.seed, self.inner.out_dir
        )
    }
}

/// Simulate the environment grid; returns the number of environments.
#[pyfunction]
#[pyo3(signature = (config, force=false))]
fn simulate(config: &PyExperimentConfig, force: bool) -> PyResult<usize> {
    Ok(cmd_simulate(&config.inner, force).map_err(to_py)?.envs.len())
}

/// Train one expert per train environment; returns (env_id, best_loss) pairs.
#[pyfunction]
#[pyo3(signature = (config, parallelism=1, allow_failures=false))]
fn train_experts(
    config: &PyExperimentConfig,
    parallelism: usize,
    allow_failures: bool,
) -> PyResult<Vec<(String, f64)>> {
    let outcome =
        cmd_train_experts(&config.inner, parallelism, allow_failures).map_err(to_py)?;
    Ok(outcome
        .rows
        .into_iter()
        .map(|r| (r.env_id, r.best_epoch_loss))
        .collect())
}

#[pyfunction]
fn train_vae(config: &PyExperimentConfig) -> PyResult<()> {
    cmd_train_vae(&config.inner).map_err(to_py)
}

#[pyfunction]
fn train_cfm(config: &PyExperimentConfig) -> PyResult<()> {
    cmd_train_cfm(&config.inner).map_err(to_py)
}

/// Evaluate generated and oracle forecasters; returns
/// (method, split, env_id, seed, rmse) rows.
#[pyfunction]
fn evaluate(config: &PyExperimentConfig) -> PyResult<Vec<(String, String, String, u64, f64)>> {
    let table = cmd_evaluate(&config.inner).map_err(to_py)?;
    Ok(table
        .rows
        .into_iter()
        .map(|r| (r.method, r.split, r.env_id, r.seed, r.rmse))
        .collect())
}

/// Export PCA-projected latent paths; returns the two explained-variance
/// ratios.
#[pyfunction]
fn export_latents(config: &PyExperimentConfig) -> PyResult<(f64, f64)> {
    let (_, pca) = cmd_export_latents(&config.inner).map_err(to_py)?;
    Ok((pca.explained[0], pca.explained[1]))
}

/// Generate forecaster weights for an unseen coefficient vector and save the
/// checkpoint; returns the number of generated parameters.
#[pyfunction]
fn generate_forecaster(
    config: &PyExperimentConfig,
    e_new: Vec<f64>,
    seed: u64,
    out_path: PathBuf,
) -> PyResult<usize> {
    let ds = load_dataset(&config.inner.dataset_dir()).map_err(to_py)?;
    let gen = load_generative(&config.inner, &ds).map_err(to_py)?;
    let ckpt = gen.generate_checkpoint(&e_new, seed).map_err(to_py)?;
    ckpt.save(&out_path).map_err(to_py)?;
    Ok(ckpt.payload.len())
}

/// Inspect a checkpoint: (kind, metadata dict, parameter count).
#[pyfunction]
fn inspect_checkpoint(
    path: PathBuf,
) -> PyResult<(String, std::collections::BTreeMap<String, String>, usize)> {
    let ckpt = Checkpoint::load(&path).map_err(to_py)?;
    Ok((ckpt.kind.clone(), ckpt.metadata.clone(), ckpt.payload.len()))
}

#[pymodule]
fn fnfm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_function(wrap_pyfunction!(generate_ba, m)?)?;
    m.add_function(wrap_pyfunction!(generate_regular, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_sis, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_hill, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train_experts, m)?)?;
    m.add_function(wrap_pyfunction!(train_vae, m)?)?;
    m.add_function(wrap_pyfunction!(train_cfm, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(export_latents, m)?)?;
    m.add_function(wrap_pyfunction!(generate_forecaster, m)?)?;
    m.add_function(wrap_pyfunction!(inspect_checkpoint, m)?)?;
    Ok(())
}
