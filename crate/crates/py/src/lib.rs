//! Python extension module exposing the main samkit types and operations:
//! datasets, models, the optimizer family, and the cost model.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use samkit_core::data;
use samkit_core::error::Error;
use samkit_core::harness;
use samkit_core::instrument::{self, CostMethod, CostModel};
use samkit_core::model::{Model as CoreModel, ModelConfig};
use samkit_core::optim::{
    self, K2Decay, Objective, OptimConfig, OptimState, Selection, StepMethod, TaskBatch,
};
use samkit_core::params::ParamVector;
use samkit_core::rng::SplitMix64;
use samkit_core::tensor::Tensor;

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass]
#[derive(Clone)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.inputs().shape().to_vec()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    /// Normalizes in place with this dataset's own per-feature statistics
    /// and returns the (mean, std) pair so a test split can reuse it.
    fn normalize(&mut self) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let stats = self.inner.compute_stats();
        self.inner.normalize_with(&stats).map_err(to_py_err)?;
        Ok((stats.mean, stats.std))
    }

    fn normalize_with(&mut self, mean: Vec<f64>, std: Vec<f64>) -> PyResult<()> {
        self.inner
            .normalize_with(&data::NormStats { mean, std })
            .map_err(to_py_err)
    }

    /// Deterministic index batches for one epoch (Fisher-Yates per
    /// (seed, epoch), matching the training harness).
    #[pyo3(signature = (batch, seed, epoch, shuffle=true, drop_last=true))]
    fn epoch_batches(
        &self,
        batch: usize,
        seed: u64,
        epoch: u64,
        shuffle: bool,
        drop_last: bool,
    ) -> PyResult<Vec<Vec<usize>>> {
        let stream =
            data::BatchStream::new(&self.inner, batch, seed, shuffle, drop_last).map_err(to_py_err)?;
        Ok(stream
            .batches(epoch)
            .map_err(to_py_err)?
            .into_iter()
            .map(|b| b.indices)
            .collect())
    }
}

#[pyfunction]
#[pyo3(signature = (classes, per_class, dim, separation, seed, split=0))]
fn synth_blobs(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
    split: u64,
) -> PyResult<Dataset> {
    Ok(Dataset {
        inner: data::synth_blobs(classes, per_class, dim, separation, seed, split)
            .map_err(to_py_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (classes, per_class, noise, class_scale, seed, split=0))]
fn synth_images(
    classes: usize,
    per_class: usize,
    noise: f64,
    class_scale: f64,
    seed: u64,
    split: u64,
) -> PyResult<Dataset> {
    Ok(Dataset {
        inner: data::synth_images(classes, per_class, noise, class_scale, seed, split)
            .map_err(to_py_err)?,
    })
}

#[pyfunction]
fn load_idx(images_path: PathBuf, labels_path: PathBuf) -> PyResult<Dataset> {
    Ok(Dataset {
        inner: data::load_idx(&images_path, &labels_path).map_err(to_py_err)?,
    })
}

#[pyfunction]
fn write_idx(dataset: &Dataset, images_path: PathBuf, labels_path: PathBuf) -> PyResult<()> {
    data::write_idx(&dataset.inner, &images_path, &labels_path).map_err(to_py_err)
}

#[pyclass]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn mlp(features: usize, hidden: Vec<usize>, classes: usize, seed: u64) -> PyResult<Model> {
        Ok(Model {
            inner: CoreModel::init(ModelConfig::mlp(features, hidden, classes, seed))
                .map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn convnet(
        input_shape: [usize; 3],
        channels: [usize; 2],
        fc: usize,
        classes: usize,
        seed: u64,
    ) -> PyResult<Model> {
        Ok(Model {
            inner: CoreModel::init(ModelConfig::convnet(input_shape, channels, fc, classes, seed))
                .map_err(to_py_err)?,
        })
    }

    fn param_len(&self) -> usize {
        self.inner.param_len()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params_flat().into_vec()
    }

    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner
            .set_flat(&ParamVector::from_vec(values))
            .map_err(to_py_err)
    }

    fn add_in_place(&mut self, values: Vec<f64>) -> PyResult<()> {
        self.inner
            .add_in_place(&ParamVector::from_vec(values))
            .map_err(to_py_err)
    }

    /// Inference-mode logits for a batch given as nested lists.
    fn forward(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let tensor = Tensor::from_rows(&inputs).map_err(to_py_err)?;
        let logits = self.inner.forward_infer(&tensor).map_err(to_py_err)?;
        let classes = logits.shape()[1];
        Ok(logits.data().chunks(classes).map(|c| c.to_vec()).collect())
    }

    fn accuracy(&self, dataset: &Dataset) -> PyResult<f64> {
        harness::evaluate_accuracy(&self.inner, &dataset.inner, 256).map_err(to_py_err)
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_checkpoint(&path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load_checkpoint(path: PathBuf) -> PyResult<Model> {
        Ok(Model {
            inner: CoreModel::load_checkpoint(&path).map_err(to_py_err)?,
        })
    }
}

/// Steps a model with one of the optimizer family members.
#[pyclass]
struct Trainer {
    method: StepMethod,
    config: OptimConfig,
    state: OptimState,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (model, method, lr, momentum=0.0, weight_decay=0.0, rho=0.05, k1=16, k2=64, selection="topk", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        model: &Model,
        method: &str,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        rho: f64,
        k1: usize,
        k2: usize,
        selection: &str,
        seed: u64,
    ) -> PyResult<Trainer> {
        let method = match method {
            "sgd" => StepMethod::Sgd,
            "topk-sgd" => StepMethod::TopkSgd,
            "sam" => StepMethod::Sam,
            "ksam" => StepMethod::Ksam,
            other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
        };
        let selection = match selection {
            "topk" => Selection::TopK,
            "random" => Selection::Random,
            other => return Err(PyValueError::new_err(format!("unknown selection {other:?}"))),
        };
        Ok(Trainer {
            method,
            config: OptimConfig {
                lr,
                momentum,
                weight_decay,
                rho,
                k1,
                k2,
                k2_decay: K2Decay::None,
                selection,
                zero_grad_tol: 1e-12,
            },
            state: OptimState::new(model.param_len(), seed),
        })
    }

    /// Runs one optimizer step on the dataset rows named by `indices` and
    /// returns the step report as a dict.
    fn step_batch<'py>(
        &mut self,
        py: Python<'py>,
        model: &mut Model,
        dataset: &Dataset,
        indices: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let inputs = dataset
            .inner
            .inputs()
            .gather_rows(&indices)
            .map_err(to_py_err)?;
        let labels: Vec<usize> = indices
            .iter()
            .map(|&i| dataset.inner.labels()[i])
            .collect();
        let mut task = TaskBatch::new(&mut model.inner, &inputs, &labels).map_err(to_py_err)?;
        let report =
            optim::run_step(self.method, &mut task, &mut self.state, &self.config).map_err(to_py_err)?;
        let out = PyDict::new(py);
        out.set_item("step", report.step)?;
        out.set_item("loss_full", report.loss_full)?;
        out.set_item("eps_norm", report.eps_norm)?;
        out.set_item("descent_grad_norm", report.descent_grad_norm)?;
        out.set_item("degenerate_ascent", report.degenerate_ascent)?;
        out.set_item("cost_units", report.cost_units)?;
        out.set_item(
            "ascent_indices",
            report.ascent_indices.map(|s| s.as_slice().to_vec()),
        )?;
        out.set_item(
            "descent_indices",
            report.descent_indices.map(|s| s.as_slice().to_vec()),
        )?;
        Ok(out)
    }
}

#[pyfunction]
fn select_topk(losses: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    Ok(optim::select_topk(&losses, k)
        .map_err(to_py_err)?
        .as_slice()
        .to_vec())
}

#[pyfunction]
fn select_random(losses: Vec<f64>, k: usize, seed: u64) -> PyResult<Vec<usize>> {
    let mut rng = SplitMix64::new(seed);
    Ok(optim::select_random(&losses, k, &mut rng)
        .map_err(to_py_err)?
        .as_slice()
        .to_vec())
}

#[pyfunction]
#[pyo3(signature = (gradient, rho, tol=1e-12))]
fn compute_perturbation(gradient: Vec<f64>, rho: f64, tol: f64) -> PyResult<(Vec<f64>, bool)> {
    let (eps, degenerate) =
        optim::compute_perturbation(&ParamVector::from_vec(gradient), rho, tol).map_err(to_py_err)?;
    Ok((eps.into_vec(), degenerate))
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    instrument::cosine(&ParamVector::from_vec(a), &ParamVector::from_vec(b)).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (batch, k1, k2, method, beta=2.343, sigma=0.0))]
fn cost_estimate<'py>(
    py: Python<'py>,
    batch: usize,
    k1: usize,
    k2: usize,
    method: &str,
    beta: f64,
    sigma: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let method = match method {
        "sgd" => CostMethod::Sgd,
        "sam" => CostMethod::Sam,
        "ksam" => CostMethod::Ksam,
        other => return Err(PyValueError::new_err(format!("unknown cost method {other:?}"))),
    };
    let model = CostModel::new(beta, sigma).map_err(to_py_err)?;
    let estimate = model.estimate(batch, k1, k2, method);
    let out = PyDict::new(py);
    out.set_item("units", estimate.units)?;
    out.set_item("ratio_vs_sgd", estimate.ratio_vs_sgd)?;
    out.set_item("equal_cost_frontier", model.equal_cost_frontier(batch))?;
    Ok(out)
}

/// Runs a full config-driven training run (the `samkit train` command) and
/// returns the run summary.
#[pyfunction]
#[pyo3(signature = (config_path, overrides=vec![]))]
fn train<'py>(py: Python<'py>, config_path: PathBuf, overrides: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let mut config = harness::FlatConfig::from_file(&config_path).map_err(to_py_err)?;
    config.apply_overrides(&overrides).map_err(to_py_err)?;
    let setup = harness::resolve(config).map_err(to_py_err)?;
    let summary = harness::cmd_train(&setup).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("run_id", summary.run_id)?;
    out.set_item("method", summary.method)?;
    out.set_item("final_test_accuracy", summary.final_test_accuracy)?;
    out.set_item("total_wall_clock_ns", summary.total_wall_clock_ns)?;
    out.set_item("total_cost_units", summary.total_cost_units)?;
    out.set_item("config_hash", summary.config_hash)?;
    Ok(out)
}

/// Per-example losses of a model over a dataset batch, inference mode.
#[pyfunction]
fn per_example_losses(model: &mut Model, dataset: &Dataset, indices: Vec<usize>) -> PyResult<Vec<f64>> {
    let inputs = dataset
        .inner
        .inputs()
        .gather_rows(&indices)
        .map_err(to_py_err)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.inner.labels()[i]).collect();
    let mut task = TaskBatch::new(&mut model.inner, &inputs, &labels).map_err(to_py_err)?;
    task.per_example_losses().map_err(to_py_err)
}

#[pymodule]
fn samkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(synth_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(synth_images, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(write_idx, m)?)?;
    m.add_function(wrap_pyfunction!(select_topk, m)?)?;
    m.add_function(wrap_pyfunction!(select_random, m)?)?;
    m.add_function(wrap_pyfunction!(compute_perturbation, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(cost_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(per_example_losses, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
