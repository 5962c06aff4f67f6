//! Python bindings. Arrays cross the boundary as nested lists of floats;
//! structured results come back as plain dicts.

use std::path::PathBuf;

use mlx_core::config::ExperimentConfig;
use mlx_core::data::{gen_toy2d, read_cache, DatasetSplits, MaskedExample};
use mlx_core::ibp::{input_box, propagate};
use mlx_core::metrics::{evaluate, EvalOptions};
use mlx_core::model::{MlpSpec, ModelParams};
use mlx_core::perturb::{pgd_attack, PerturbConfig, PerturbMethod};
use mlx_core::rng::{stream, Stream};
use mlx_core::run::{run, Command};
use mlx_core::theory::{prop1_weights, verify, TheoryConfig};
use mlx_core::train::{importance_scores, train, TrainingConfig};
use mlx_core::{Error, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("expected at least one row"));
    }
    Tensor::from_rows(rows).map_err(py_err)
}

fn to_rows(t: &Tensor) -> PyResult<Vec<Vec<f64>>> {
    let (n, _) = t.dims2().map_err(py_err)?;
    Ok((0..n).map(|i| t.row(i).to_vec()).collect())
}

/// Train/val/test splits of `(x, y, m, group)` examples.
#[pyclass(name = "Dataset", frozen)]
pub struct PyDataset {
    inner: DatasetSplits,
}

#[pymethods]
impl PyDataset {
    /// Toy-2D data: label from `x1`, nuisance `x2`.
    #[staticmethod]
    fn toy2d(n: usize, seed: u64) -> PyResult<Self> {
        Ok(PyDataset {
            inner: gen_toy2d(n, seed).map_err(py_err)?,
        })
    }

    /// Reads a dataset cache written by `mlx gen-data`.
    #[staticmethod]
    fn load_cache(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = read_cache(&path).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    /// `(x, y, m, group)` lists for `"train"`, `"val"` or `"test"`.
    #[allow(clippy::type_complexity)]
    fn split(&self, which: &str) -> PyResult<(Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>)> {
        let ex = split(&self.inner, which)?;
        Ok((
            ex.iter().map(|e| e.x.clone()).collect(),
            ex.iter().map(|e| e.y).collect(),
            ex.iter().map(|e| e.m.clone()).collect(),
            ex.iter().map(|e| e.group).collect(),
        ))
    }

    fn __len__(&self) -> usize {
        self.inner.train.len() + self.inner.val.len() + self.inner.test.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({:?}, train={}, val={}, test={})",
            self.inner.name,
            self.inner.train.len(),
            self.inner.val.len(),
            self.inner.test.len()
        )
    }
}

fn split<'a>(data: &'a DatasetSplits, which: &str) -> PyResult<&'a [MaskedExample]> {
    match which {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

/// A ReLU MLP classifier.
#[pyclass(name = "Model", frozen)]
pub struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// He-initialised weights for layer widths `[input, hidden..., classes]`.
    #[staticmethod]
    fn init(widths: Vec<usize>, seed: u64) -> PyResult<Self> {
        let spec = spec_from(&widths)?;
        let inner = ModelParams::init(&spec, &mut stream(seed, Stream::Init)).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    /// Returns `(model, config_hash, seed)`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, u64, u64)> {
        let (inner, hash, seed) = ModelParams::load(&path).map_err(py_err)?;
        Ok((PyModel { inner }, hash, seed))
    }

    #[pyo3(signature = (path, config_hash = 0, seed = 0))]
    fn save(&self, path: PathBuf, config_hash: u64, seed: u64) -> PyResult<()> {
        self.inner.save(&path, config_hash, seed).map_err(py_err)
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.inner.spec().widths.clone()
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        to_rows(&self.inner.logits(&matrix(&x)?).map_err(py_err)?)
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(&matrix(&x)?).map_err(py_err)
    }

    /// Input gradient of the summed log-probabilities, one row per input.
    fn importance_scores(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        to_rows(&importance_scores(&self.inner, &matrix(&x)?).map_err(py_err)?)
    }

    /// Output-layer interval `(lower, upper)` for the masked box of radius
    /// `kappa` around `x`.
    #[pyo3(signature = (x, m, kappa, clamp = None))]
    fn ibp_bounds(&self, x: Vec<f64>, m: Vec<f64>, kappa: f64, clamp: Option<(f64, f64)>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let bx = input_box(&x, &m, kappa, clamp).map_err(py_err)?;
        let out = propagate(&self.inner, &bx).map_err(py_err)?;
        Ok((out.lower().to_vec(), out.upper().to_vec()))
    }

    /// Masked ℓ∞ PGD perturbation for one example.
    #[pyo3(signature = (x, y, m, kappa, steps = 7, clamp = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn pgd_attack(
        &self,
        x: Vec<f64>,
        y: usize,
        m: Vec<f64>,
        kappa: f64,
        steps: usize,
        clamp: Option<(f64, f64)>,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cfg = PerturbConfig {
            method: PerturbMethod::Pgd,
            kappa,
            steps,
            clamp,
            ..PerturbConfig::default()
        };
        pgd_attack(&self.inner, &x, y, &m, &cfg, &mut stream(seed, Stream::Pgd)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Model(widths={:?})", self.inner.spec().widths)
    }
}

fn spec_from(widths: &[usize]) -> PyResult<MlpSpec> {
    match widths {
        [input, hidden @ .., classes] => MlpSpec::new(*input, hidden, *classes).map_err(py_err),
        _ => Err(PyValueError::new_err("widths needs at least input and output sizes")),
    }
}

/// Trains a model; `config` is a JSON training block (unknown keys are
/// rejected). Returns `(model, history, best_epoch)`.
#[pyfunction]
#[pyo3(signature = (dataset, widths, config = "{}"))]
fn train_model<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    widths: Vec<usize>,
    config: &str,
) -> PyResult<(PyModel, Bound<'py, PyAny>, usize)> {
    let cfg: TrainingConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let spec = spec_from(&widths)?;
    let out = py.detach(|| train(&dataset.inner, &spec, &cfg)).map_err(py_err)?;
    let history = to_py(py, &out.history)?;
    Ok((PyModel { inner: out.params }, history, out.best_epoch))
}

/// Accuracy, worst-group accuracy, RCS and saliency statistics on a split.
#[pyfunction]
#[pyo3(signature = (model, dataset, split_name = "test", rcs_sigma = Some(0.25), saliency = true, seed = 0))]
fn evaluate_model<'py>(
    py: Python<'py>,
    model: &PyModel,
    dataset: &PyDataset,
    split_name: &str,
    rcs_sigma: Option<f64>,
    saliency: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let ex = split(&dataset.inner, split_name)?;
    let opts = EvalOptions { rcs_sigma, saliency };
    let report = evaluate(&model.inner, ex, opts, &mut stream(seed, Stream::Rcs)).map_err(py_err)?;
    to_py(py, &report)
}

/// Noise-averaging regression weights for `d` irrelevant features and
/// relevant-feature precision `k`.
#[pyfunction]
#[pyo3(name = "prop1_weights")]
fn py_prop1_weights(d: usize, k: f64) -> PyResult<Vec<f64>> {
    prop1_weights(d, k).map_err(py_err)
}

/// Runs the GP theory checks; `config` is a JSON theory block.
#[pyfunction]
#[pyo3(signature = (config = "{}"))]
fn theory_verify<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TheoryConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let report = py.detach(|| verify(&cfg)).map_err(py_err)?;
    to_py(py, &report)
}

/// Same as `mlx <subcommand> --config <path> [--out <dir>]`; returns the
/// summary line and written paths.
#[pyfunction]
#[pyo3(signature = (subcommand, config_path, out = None))]
fn run_command(py: Python<'_>, subcommand: &str, config_path: PathBuf, out: Option<PathBuf>) -> PyResult<(String, Vec<PathBuf>)> {
    let cmd: Command = subcommand.parse().map_err(py_err)?;
    let cfg = ExperimentConfig::load(&config_path).map_err(py_err)?;
    let res = py.detach(|| run(cmd, &cfg, out.as_deref(), |_| {})).map_err(py_err)?;
    Ok((res.summary, res.artifacts))
}

#[pymodule]
fn mlx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(py_prop1_weights, m)?)?;
    m.add_function(wrap_pyfunction!(theory_verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
