use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use geopool::gistats::{self, Weighting, Window};
use geopool::metrics;
use geopool::micronet::{self, Architecture, Arm, ModelParams, ReferenceArchitecture, TrainConfig};
use geopool::pooling;
use geopool::synthdata::{self, Distribution, SceneSpec, SplitKind};
use geopool::{FeatureMap, LabelGrid, PoolConfig, PoolMode, PoolResult, Rng};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn weighting(name: &str) -> PyResult<Weighting> {
    match name {
        "distance" => Ok(Weighting::Distance),
        "inverse" | "inverse_distance" => Ok(Weighting::InverseDistance),
        other => Err(err(format!("unknown weighting {other:?}"))),
    }
}

fn to_json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Dense `(channels, height, width)` map of floats, row-major per channel.
#[pyclass(name = "FeatureMap", module = "pygeopool", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFeatureMap {
    inner: FeatureMap,
}

#[pymethods]
impl PyFeatureMap {
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        FeatureMap::from_vec(channels, height, width, data)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn get(&self, c: usize, y: usize, x: usize) -> PyResult<f64> {
        let (ch, h, w) = self.inner.shape();
        if c >= ch || y >= h || x >= w {
            return Err(err(format!("index ({c}, {y}, {x}) outside {ch}x{h}x{w}")));
        }
        Ok(self.inner.get(c, y, x))
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.inner.shape();
        format!("FeatureMap({c}x{h}x{w})")
    }
}

/// Output of one pooling call, with the routing needed by the backward pass.
#[pyclass(name = "PoolResult", module = "pygeopool", frozen)]
struct PyPoolResult {
    inner: PoolResult,
}

#[pymethods]
impl PyPoolResult {
    #[getter]
    fn output(&self) -> PyFeatureMap {
        PyFeatureMap {
            inner: self.inner.output().clone(),
        }
    }

    #[getter]
    fn hotspot_flags(&self) -> Vec<bool> {
        self.inner.hotspot_flags().to_vec()
    }

    #[getter]
    fn gi_star(&self) -> Option<PyFeatureMap> {
        self.inner.gi_star().map(|g| PyFeatureMap {
            inner: g.as_feature_map().clone(),
        })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.config().mode.name()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.config().threshold
    }

    /// Percentage of windows that took the hotspot branch.
    fn hotspot_rate(&self) -> f64 {
        self.inner.hotspot_rate()
    }
}

/// Gi* of one square window given row-major.
#[pyfunction]
#[pyo3(signature = (values, side = 4, weights = "distance"))]
fn gi_star(values: Vec<f64>, side: usize, weights: &str) -> PyResult<f64> {
    let window = Window::new(side, values).map_err(err)?;
    Ok(gistats::gi_star_with(&window, weighting(weights)?))
}

#[pyfunction]
#[pyo3(signature = (map, window = 4, weights = "distance"))]
fn gi_star_map(map: &PyFeatureMap, window: usize, weights: &str) -> PyResult<PyFeatureMap> {
    let config = PoolConfig::new(PoolMode::GPool, window, 0.0)
        .map_err(err)?
        .with_weighting(weighting(weights)?);
    let g = gistats::gi_star_map(&map.inner, &config).map_err(err)?;
    Ok(PyFeatureMap {
        inner: g.into_feature_map(),
    })
}

#[pyfunction]
#[pyo3(signature = (map, mode = "gpool", window = 4, threshold = 1.5, weights = "distance"))]
fn pool(map: &PyFeatureMap, mode: &str, window: usize, threshold: f64, weights: &str) -> PyResult<PyPoolResult> {
    let mode: PoolMode = mode.parse().map_err(err)?;
    let config = PoolConfig::new(mode, window, threshold)
        .map_err(err)?
        .with_weighting(weighting(weights)?);
    pooling::pool(&map.inner, &config)
        .map(|inner| PyPoolResult { inner })
        .map_err(err)
}

#[pyfunction]
fn pool_backward(result: &PyPoolResult, grad: &PyFeatureMap) -> PyResult<PyFeatureMap> {
    pooling::pool_backward(&result.inner, &grad.inner)
        .map(|inner| PyFeatureMap { inner })
        .map_err(err)
}

#[pyfunction]
fn unpool(result: &PyPoolResult, pooled: &PyFeatureMap, height: usize, width: usize) -> PyResult<PyFeatureMap> {
    pooling::unpool(&result.inner, &pooled.inner, height, width)
        .map(|inner| PyFeatureMap { inner })
        .map_err(err)
}

#[pyfunction]
fn hotspot_stats<'py>(
    py: Python<'py>,
    results: Vec<PyRef<'py, PyPoolResult>>,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let refs: Vec<&PoolResult> = results.iter().map(|r| &r.inner).collect();
    let stats = pooling::hotspot_stats(&refs, threshold).map_err(err)?;
    to_json(py, &stats)
}

fn spec(distribution: &str, height: usize, width: usize) -> PyResult<SceneSpec> {
    let distribution: Distribution = distribution.parse().map_err(err)?;
    let spec = SceneSpec {
        height,
        width,
        ..SceneSpec::new(distribution)
    };
    spec.validate().map_err(err)?;
    Ok(spec)
}

fn split_kind(name: &str) -> PyResult<SplitKind> {
    match name {
        "train" => Ok(SplitKind::Train),
        "val" => Ok(SplitKind::Val),
        "test" => Ok(SplitKind::Test),
        other => Err(err(format!("unknown split {other:?}"))),
    }
}

type Sample = (PyFeatureMap, Vec<u32>);

fn sample_tuple(s: synthdata::SceneSample) -> Sample {
    (PyFeatureMap { inner: s.image }, s.labels.labels().to_vec())
}

/// One synthetic scene: `(image, labels)`, labels flattened row-major.
#[pyfunction]
#[pyo3(signature = (distribution = "A", seed = 0, height = 64, width = 64))]
fn generate_scene(distribution: &str, seed: u64, height: usize, width: usize) -> PyResult<Sample> {
    let spec = spec(distribution, height, width)?;
    let mut rng = Rng::new(seed);
    synthdata::generate_scene(&spec, &mut rng)
        .map(sample_tuple)
        .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (distribution = "A", seed = 0, split = "train", count = 8, height = 64, width = 64))]
fn generate_samples(
    distribution: &str,
    seed: u64,
    split: &str,
    count: usize,
    height: usize,
    width: usize,
) -> PyResult<Vec<Sample>> {
    let spec = spec(distribution, height, width)?;
    let samples = synthdata::generate_samples(&spec, seed, split_kind(split)?, count).map_err(err)?;
    Ok(samples.into_iter().map(sample_tuple).collect())
}

#[pyclass(name = "ConfusionMatrix", module = "pygeopool")]
struct PyConfusionMatrix {
    inner: metrics::ConfusionMatrix,
}

#[pymethods]
impl PyConfusionMatrix {
    #[new]
    fn new(num_classes: usize) -> PyResult<Self> {
        metrics::ConfusionMatrix::new(num_classes)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Adds pixel pairs; truth 255 is skipped.
    fn accumulate(&mut self, pred: Vec<u32>, truth: Vec<u32>) -> PyResult<()> {
        self.inner.accumulate_labels(&pred, &truth).map_err(err)
    }

    fn counts(&self) -> Vec<Vec<u64>> {
        let k = self.inner.num_classes();
        self.inner.counts().chunks(k).map(|r| r.to_vec()).collect()
    }

    fn finalize<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_json(py, &self.inner.finalize().map_err(err)?)
    }
}

/// Per-class IoU, mIoU and pixel accuracy for one prediction.
#[pyfunction]
fn evaluate_labels<'py>(
    py: Python<'py>,
    pred: Vec<u32>,
    truth: Vec<u32>,
    num_classes: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cm = metrics::ConfusionMatrix::new(num_classes).map_err(err)?;
    cm.accumulate_labels(&pred, &truth).map_err(err)?;
    to_json(py, &metrics::finalize(&cm).map_err(err)?)
}

/// Trained weights plus the architecture they belong to.
#[pyclass(name = "Model", module = "pygeopool", frozen)]
struct PyModel {
    arch: Architecture,
    params: ModelParams,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn parameter_count(&self) -> usize {
        self.arch.parameter_count()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn predict(&self, py: Python<'_>, image: &PyFeatureMap) -> PyResult<Vec<u32>> {
        let grid: LabelGrid = py
            .detach(|| micronet::predict(&self.params, &self.arch, &image.inner))
            .map_err(err)?;
        Ok(grid.labels().to_vec())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.params.save(path).map_err(err)
    }
}

/// Trains the reference network on generated data; returns `(report, model)`.
#[pyfunction]
#[pyo3(signature = (arm = "gpool-1.5", distribution = "A", seed = 0, n_train = 8, n_val = 2, epochs = 5, height = 64, width = 64))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    arm: &str,
    distribution: &str,
    seed: u64,
    n_train: usize,
    n_val: usize,
    epochs: usize,
    height: usize,
    width: usize,
) -> PyResult<(Bound<'py, PyAny>, PyModel)> {
    let arm: Arm = arm.parse().map_err(err)?;
    let spec = spec(distribution, height, width)?;
    let arch = ReferenceArchitecture::build(arm, (3, height, width), spec.num_classes()).map_err(err)?;
    let config = TrainConfig {
        seed,
        epochs_max: epochs,
        ..TrainConfig::default()
    };
    let outcome = py
        .detach(|| {
            let train_set = synthdata::generate_samples(&spec, seed, SplitKind::Train, n_train)?;
            let val_set = synthdata::generate_samples(&spec, seed, SplitKind::Val, n_val)?;
            micronet::train(&arch, &train_set, &val_set, &config)
        })
        .map_err(err)?;
    let report = to_json(py, &outcome.report)?;
    Ok((
        report,
        PyModel {
            arch,
            params: outcome.params,
        },
    ))
}

#[pymodule]
fn pygeopool(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyPoolResult>()?;
    m.add_class::<PyConfusionMatrix>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gi_star, m)?)?;
    m.add_function(wrap_pyfunction!(gi_star_map, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(pool_backward, m)?)?;
    m.add_function(wrap_pyfunction!(unpool, m)?)?;
    m.add_function(wrap_pyfunction!(hotspot_stats, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(generate_samples, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_labels, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
