//! Python bindings. Configs go in as keyword arguments, reports and gates
//! come back as plain dicts.

use std::path::PathBuf;

use ::lightff as core;
use core::calibrate::{self, CalibConfig};
use core::persist::{self, ModelMeta};
use core::{cost, data, infer, train, InferenceMode, TrainConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn py_err(e: core::Error) -> PyErr {
    use core::Error::*;
    match e {
        Io(_) | Load { .. } | Model(_) => PyOSError::new_err(e.to_string()),
        TrainingDiverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serializes through Python's json module so nested values become dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Keyword arguments over the type's defaults; unknown keys are rejected.
fn from_kwargs<T: DeserializeOwned>(py: Python<'_>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let text: String = match kwargs {
        Some(k) => py.import("json")?.call_method1("dumps", (k,))?.extract()?,
        None => "{}".into(),
    };
    serde_json::from_str(&text).map_err(json_err)
}

fn parse_mode(mode: &str) -> PyResult<InferenceMode> {
    mode.parse().map_err(|e: core::Error| py_err(e))
}

#[pyclass(module = "lightff", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: core::Dataset,
}

#[pymethods]
impl Dataset {
    /// Rows of features and integer labels in `0..num_classes`.
    #[new]
    fn new(features: Vec<Vec<f32>>, labels: Vec<usize>, num_classes: usize) -> PyResult<Self> {
        if features.len() != labels.len() {
            return Err(PyValueError::new_err(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let samples = features
            .into_iter()
            .zip(labels)
            .map(|(features, label)| core::Sample {
                features: features.into(),
                label,
            })
            .collect();
        let inner = core::Dataset::new(samples, num_classes, core::SplitTag::Train).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n_per_class, num_classes, dim, separation, seed=0))]
    fn synthetic(n_per_class: usize, num_classes: usize, dim: usize, separation: f32, seed: u64) -> PyResult<Self> {
        let inner = data::make_synthetic(n_per_class, num_classes, dim, separation, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_idx(images, labels).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf, num_classes: usize) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_csv(path, num_classes).map_err(py_err)?,
        })
    }

    /// Seeded shuffle into (train, val, test).
    #[pyo3(signature = (fractions=(0.6, 0.2, 0.2), seed=0))]
    fn split(&self, fractions: (f64, f64, f64), seed: u64) -> PyResult<(Self, Self, Self)> {
        let (a, b, c) = data::split(&self.inner, fractions, seed).map_err(py_err)?;
        Ok((Self { inner: a }, Self { inner: b }, Self { inner: c }))
    }

    fn slice(&self, start: usize, end: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.slice(start, end, core::SplitTag::Train).map_err(py_err)?,
        })
    }

    fn features(&self, i: usize) -> PyResult<Vec<f32>> {
        self.sample(i).map(|s| s.features.to_vec())
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.sample(i).map(|s| s.label)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} samples, {} features, {} classes)",
            self.inner.len(),
            self.inner.dim(),
            self.inner.num_classes()
        )
    }
}

impl Dataset {
    fn sample(&self, i: usize) -> PyResult<&core::Sample> {
        self.inner
            .samples()
            .get(i)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("sample {i} out of range")))
    }
}

#[pyclass(module = "lightff", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: core::Model,
}

#[pymethods]
impl Model {
    /// Forward-Forward training. Keyword arguments are training options
    /// (learning_rate, epochs, batch_size, momentum, normalize, seed, ...).
    #[staticmethod]
    #[pyo3(signature = (train, arch, **config))]
    fn train_ff(
        py: Python<'_>,
        train: &Dataset,
        arch: Vec<usize>,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let cfg: TrainConfig = from_kwargs(py, config)?;
        let net = py
            .detach(|| train::train_ff(&train.inner, &arch, &cfg))
            .map_err(py_err)?;
        Ok(Self {
            inner: core::Model::Forward(net),
        })
    }

    /// PEPITA training (at most 3 hidden layers) followed by per-layer readouts.
    #[staticmethod]
    #[pyo3(signature = (train, arch, **config))]
    fn train_pepita(
        py: Python<'_>,
        train: &Dataset,
        arch: Vec<usize>,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let cfg: TrainConfig = from_kwargs(py, config)?;
        let net = py
            .detach(|| {
                let net = train::train_pepita(&train.inner, &arch, &cfg)?;
                train::train_pt_readouts(&net, &train.inner, &cfg)
            })
            .map_err(py_err)?;
        Ok(Self {
            inner: core::Model::Pepita(net),
        })
    }

    /// Backprop baseline; pass `normalize="off"`.
    #[staticmethod]
    #[pyo3(signature = (train, arch, **config))]
    fn train_bp(
        py: Python<'_>,
        train: &Dataset,
        arch: Vec<usize>,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let cfg: TrainConfig = from_kwargs(py, config)?;
        let net = py
            .detach(|| train::train_bp(&train.inner, &arch, &cfg))
            .map_err(py_err)?;
        Ok(Self {
            inner: core::Model::Forward(net),
        })
    }

    /// Fits softmax heads on frozen activities: one per layer, or only the final one.
    #[pyo3(signature = (train, per_layer=true, **config))]
    fn fit_heads(
        &mut self,
        py: Python<'_>,
        train: &Dataset,
        per_layer: bool,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<()> {
        let cfg: TrainConfig = from_kwargs(py, config)?;
        let core::Model::Forward(net) = &self.inner else {
            return Err(PyValueError::new_err(
                "heads are fitted on Forward-Forward or backprop networks",
            ));
        };
        let net = py
            .detach(|| train::train_heads(net, &train.inner, &cfg, per_layer))
            .map_err(py_err)?;
        self.inner = core::Model::Forward(net);
        Ok(())
    }

    /// Fits the confidence gates of a light mode on a validation set.
    /// Keyword arguments: method ("stat" or "bce"), k, bce_epochs, ...
    #[pyo3(signature = (val, mode, **config))]
    fn calibrate(
        &mut self,
        py: Python<'_>,
        val: &Dataset,
        mode: &str,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<()> {
        let cfg: CalibConfig = from_kwargs(py, config)?;
        let gate_mode = parse_mode(mode)?.light().gate_mode();
        let model = &mut self.inner;
        py.detach(|| calibrate::calibrate_network(model, &val.inner, &cfg, gate_mode))
            .map_err(py_err)
    }

    /// Classifies one sample; returns label, exit layer, MAC counts and per-layer scores.
    fn infer<'py>(&self, py: Python<'py>, features: Vec<f32>, mode: &str) -> PyResult<Bound<'py, PyAny>> {
        let r = infer::infer(&self.inner, parse_mode(mode)?, &features).map_err(py_err)?;
        to_py(py, &r)
    }

    /// Runs a whole dataset and returns the aggregate report.
    #[pyo3(signature = (test, mode, threads=0, count_bias=true))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        test: &Dataset,
        mode: &str,
        threads: usize,
        count_bias: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let mode = parse_mode(mode)?;
        let model = &self.inner;
        let report = py
            .detach(|| infer::evaluate_with(model, &test.inner, mode, threads, count_bias))
            .map_err(py_err)?;
        to_py(py, &report)
    }

    /// Mean positive and negative goodness per layer (Forward-Forward only).
    #[pyo3(signature = (data, seed=0))]
    fn goodness_separation<'py>(&self, py: Python<'py>, data: &Dataset, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let core::Model::Forward(net) = &self.inner else {
            return Err(PyValueError::new_err(
                "goodness is defined for Forward-Forward networks",
            ));
        };
        let s = infer::goodness_separation(net, &data.inner, seed).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("positive", s.positive.clone())?;
        out.set_item("negative", s.negative.clone())?;
        out.set_item("separated", s.is_separated())?;
        Ok(out.into_any())
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        persist::save_model(dir, &self.inner, &ModelMeta::default()).map_err(py_err)?;
        Ok(())
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (inner, _) = persist::load_model(dir).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.algorithm().as_str()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.inner.widths()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn gates<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.gates())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({}, widths={:?})",
            self.inner.algorithm().as_str(),
            self.inner.widths()
        )
    }
}

/// Per-layer MAC costs (ca, cg, cs) for a fully connected architecture.
#[pyfunction]
#[pyo3(signature = (arch, input_dim, num_classes, with_bias=true))]
fn layer_costs<'py>(
    py: Python<'py>,
    arch: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
    with_bias: bool,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &cost::layer_costs_for(&arch, input_dim, num_classes, with_bias))
}

/// Expected core MACs per sample for an exit distribution `probs` (one entry per layer).
#[pyfunction]
#[pyo3(signature = (arch, input_dim, num_classes, probs, mode, with_bias=true))]
fn expected_cost(
    arch: Vec<usize>,
    input_dim: usize,
    num_classes: usize,
    probs: Vec<f64>,
    mode: &str,
    with_bias: bool,
) -> PyResult<f64> {
    let costs = cost::layer_costs_for(&arch, input_dim, num_classes, with_bias);
    let dist = cost::ExitDistribution::new(probs).map_err(py_err)?;
    match parse_mode(mode)?.light() {
        InferenceMode::LightMp => cost::expected_cost_mp(&costs, &dist),
        InferenceMode::LightOp => cost::expected_cost_op(&costs, &dist),
        other => Err(core::Error::ModeMismatch(format!("no closed-form cost for {other}"))),
    }
    .map_err(py_err)
}

#[pymodule]
fn lightff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(layer_costs, m)?)?;
    m.add_function(wrap_pyfunction!(expected_cost, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
