//! Python bindings: datasets, models, training and probing entry points,
//! the geometry helpers and the loss functions.

use std::path::PathBuf;

use pointxfer::analysis::{gradient_norms as grad_norms, GradNormConfig};
use pointxfer::datasets::{Dataset, DomainSpec, Split, SplitFractions};
use pointxfer::geometry;
use pointxfer::models::{load_checkpoint, save_checkpoint, Architecture, BackboneKind, Model};
use pointxfer::objectives;
use pointxfer::tensor::{Tape, Tensor};
use pointxfer::transfer::{
    self, estimate_normals, FinetuneConfig, Objective, ProbeConfig, Regularization, TrainConfig,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(value_err("rows have different lengths"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(&[rows.len(), cols], &flat).map_err(value_err)
}

fn points3(rows: &[[f64; 3]]) -> PyResult<Tensor<f64>> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(&[rows.len(), 3], &flat).map_err(value_err)
}

/// `k` nearest neighbours of every point, one row of indices per point.
#[pyfunction]
#[pyo3(signature = (points, k, exclude_self = true))]
fn knn(points: Vec<[f64; 3]>, k: usize, exclude_self: bool) -> PyResult<Vec<Vec<usize>>> {
    let flat = geometry::knn(&points, k, exclude_self).map_err(value_err)?;
    Ok(flat.chunks(k).map(<[usize]>::to_vec).collect())
}

/// Unit normals by local PCA, and the indices of degenerate neighbourhoods.
#[pyfunction]
#[pyo3(signature = (points, k = 30))]
fn pca_normals(points: Vec<[f64; 3]>, k: usize) -> PyResult<(Vec<[f64; 3]>, Vec<usize>)> {
    let est = geometry::pca_normals(&points, k).map_err(value_err)?;
    Ok((est.normals, est.degenerate))
}

#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    let mut t = Tape::<f64>::new();
    let x = t.constant(matrix(&logits)?);
    let loss = objectives::cross_entropy(&mut t, x, &labels).map_err(value_err)?;
    Ok(t.item(loss))
}

#[pyfunction]
#[pyo3(signature = (anchors, keys, tau = objectives::DEFAULT_TEMPERATURE))]
fn point_info_nce(anchors: Vec<Vec<f64>>, keys: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let mut t = Tape::<f64>::new();
    let a = t.constant(matrix(&anchors)?);
    let k = t.constant(matrix(&keys)?);
    let loss = objectives::point_info_nce(&mut t, a, k, tau).map_err(value_err)?;
    Ok(t.item(loss))
}

#[pyfunction]
#[pyo3(signature = (view_a, view_b, tau = objectives::DEFAULT_TEMPERATURE))]
fn shape_info_nce(view_a: Vec<Vec<f64>>, view_b: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let mut t = Tape::<f64>::new();
    let a = t.constant(matrix(&view_a)?);
    let b = t.constant(matrix(&view_b)?);
    let loss = objectives::shape_info_nce(&mut t, a, b, tau).map_err(value_err)?;
    Ok(t.item(loss))
}

#[pyfunction]
fn normal_regul_loss(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    let mut t = Tape::<f64>::new();
    let p = t.constant(points3(&pred)?);
    let g = t.constant(points3(&gt)?);
    let loss = objectives::normal_regul_loss(&mut t, p, g).map_err(value_err)?;
    Ok(t.item(loss))
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generates a stock domain: SOURCE, TARGET-NEAR or TARGET-FAR.
    #[staticmethod]
    #[pyo3(signature = (name, samples_per_class = 40, seed = 1, points_per_cloud = None))]
    fn preset(name: &str, samples_per_class: usize, seed: u64, points_per_cloud: Option<usize>) -> PyResult<Self> {
        let mut spec = DomainSpec::preset(name, samples_per_class, seed)
            .ok_or_else(|| value_err(format!("unknown preset {name:?}")))?;
        if let Some(n) = points_per_cloud {
            spec.points_per_cloud = n;
        }
        let inner = Dataset::generate(&spec, SplitFractions::default()).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Loads a dataset directory written by `pointxfer gen`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Dataset::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.inner.train().len()
    }

    #[getter]
    fn test_size(&self) -> usize {
        self.inner.test().len()
    }

    /// `(points, label, split)` of one sample.
    fn sample(&self, index: usize) -> PyResult<(Vec<[f64; 3]>, usize, &'static str)> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| value_err(format!("index {index} out of range")))?;
        let split = match s.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        Ok((s.cloud.points.clone(), s.label, split))
    }

    fn __repr__(&self) -> String {
        format!("Dataset({}, {} samples, {} classes)", self.inner.id(), self.inner.samples.len(), self.inner.num_classes())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (num_classes, backbone = "global-pointnet", seed = 0, widths = None))]
    fn new(num_classes: usize, backbone: &str, seed: u64, widths: Option<Vec<usize>>) -> PyResult<Self> {
        let kind: BackboneKind = backbone.parse().map_err(value_err)?;
        let mut arch = Architecture::new(kind, num_classes);
        if let Some(w) = widths {
            arch.widths = w;
        }
        Ok(Self {
            inner: Model::new(arch, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn layer_names(&self) -> Vec<String> {
        self.inner.arch.layer_names()
    }

    #[getter]
    fn backbone(&self) -> String {
        self.inner.arch.backbone.to_string()
    }

    #[getter]
    fn pretraining(&self) -> String {
        self.inner.provenance.pretraining.clone()
    }

    #[getter]
    fn regularized_layers(&self) -> Vec<String> {
        self.inner.provenance.regularized_layers.clone()
    }

    /// Max-pooled features of one backbone block for a single cloud.
    fn layer_features(&self, points: Vec<[f64; 3]>, layer: &str) -> PyResult<Vec<f32>> {
        let cloud = geometry::PointCloud::new(points);
        let (_, pooled) = self.inner.layer_features(&cloud, layer).map_err(value_err)?;
        Ok(pooled)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, widths={:?}, pretraining={})", self.inner.arch.backbone, self.inner.arch.widths, self.inner.provenance.pretraining)
    }
}

#[pyclass(name = "ProbeResult", get_all, frozen)]
struct PyProbeResult {
    protocol: String,
    layer: String,
    train_acc: f64,
    test_acc: f64,
    per_class: Vec<f64>,
}

impl From<transfer::ProbeResult> for PyProbeResult {
    fn from(r: transfer::ProbeResult) -> Self {
        Self {
            protocol: r.protocol.name().to_string(),
            layer: r.layer,
            train_acc: r.train_acc,
            test_acc: r.test_acc,
            per_class: r.per_class,
        }
    }
}

#[pymethods]
impl PyProbeResult {
    fn __repr__(&self) -> String {
        format!("ProbeResult({} {}: train {:.4}, test {:.4})", self.protocol, self.layer, self.train_acc, self.test_acc)
    }
}

#[pyclass(name = "LayerNorm", get_all, frozen)]
struct PyLayerNorm {
    name: String,
    depth: usize,
    param_count: usize,
    grad_l2: f64,
    grad_rms: f64,
}

/// Pre-trains `model` and returns the trained copy with its per-epoch losses.
#[pyfunction]
#[pyo3(signature = (model, data, objective = "supervised", epochs = 60, seed = 0, regularize_layers = None, lam = 1.0, points = 256, batch_size = 16))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    objective: &str,
    epochs: usize,
    seed: u64,
    regularize_layers: Option<Vec<usize>>,
    lam: f64,
    points: usize,
    batch_size: usize,
) -> PyResult<(PyModel, Vec<f64>)> {
    let objective: Objective = objective.parse().map_err(value_err)?;
    let cfg = TrainConfig {
        objective,
        regularize: regularize_layers.map(|layers| Regularization { layers, lambda: lam }),
        epochs,
        seed,
        points,
        batch_size,
        ..TrainConfig::default()
    };
    let (m, mut d) = (model.inner.clone(), data.inner.clone());
    let out = py.detach(move || {
        if cfg.regularize.is_some() {
            estimate_normals(&mut d, 30)?;
        }
        transfer::pretrain(m, &d, &cfg)
    });
    let out = out.map_err(value_err)?;
    Ok((PyModel { inner: out.model }, out.curve.iter().map(|e| e.loss).collect()))
}

fn probe_config(steps: usize, points: usize, seed: u64) -> ProbeConfig {
    ProbeConfig {
        steps,
        points,
        seed,
        ..ProbeConfig::default()
    }
}

/// Linear probe on the frozen global feature.
#[pyfunction]
#[pyo3(signature = (model, data, steps = 500, points = 256, seed = 0))]
fn linear_probe(py: Python<'_>, model: &PyModel, data: &PyDataset, steps: usize, points: usize, seed: u64) -> PyResult<PyProbeResult> {
    let cfg = probe_config(steps, points, seed);
    let (m, d) = (&model.inner, &data.inner);
    let probe = py.detach(|| transfer::linear_probe(m, d, &cfg)).map_err(value_err)?;
    Ok(probe.result.into())
}

/// Linear probe on the pooled features of one backbone block.
#[pyfunction]
#[pyo3(signature = (model, data, layer, steps = 500, points = 256, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn layer_probe(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    layer: &str,
    steps: usize,
    points: usize,
    seed: u64,
) -> PyResult<PyProbeResult> {
    let cfg = probe_config(steps, points, seed);
    let (m, d) = (&model.inner, &data.inner);
    let probe = py.detach(|| transfer::layer_probe(m, d, layer, &cfg)).map_err(value_err)?;
    Ok(probe.result.into())
}

/// Fine-tunes every weight with a fresh classifier head.
#[pyfunction]
#[pyo3(signature = (model, data, epochs = 40, points = 256, seed = 0))]
fn finetune(py: Python<'_>, model: &PyModel, data: &PyDataset, epochs: usize, points: usize, seed: u64) -> PyResult<(PyModel, PyProbeResult)> {
    let cfg = FinetuneConfig {
        epochs,
        points,
        seed,
        ..FinetuneConfig::default()
    };
    let (m, d) = (model.inner.clone(), &data.inner);
    let out = py.detach(move || transfer::finetune(m, d, &cfg)).map_err(value_err)?;
    Ok((PyModel { inner: out.model }, out.result.into()))
}

/// Per-layer gradient norms of the classification loss, and the total L2.
#[pyfunction]
#[pyo3(signature = (model, data, batches = 8, batch_size = 16, points = 256, seed = 0))]
fn gradient_norms(
    py: Python<'_>,
    model: &PyModel,
    data: &PyDataset,
    batches: usize,
    batch_size: usize,
    points: usize,
    seed: u64,
) -> PyResult<(Vec<PyLayerNorm>, f64)> {
    let cfg = GradNormConfig {
        batches,
        batch_size,
        points,
        seed,
    };
    let (m, d) = (&model.inner, &data.inner);
    let rep = py.detach(|| grad_norms(m, d, &cfg)).map_err(value_err)?;
    let layers = rep
        .layers
        .into_iter()
        .map(|l| PyLayerNorm {
            name: l.name,
            depth: l.depth,
            param_count: l.param_count,
            grad_l2: l.grad_l2,
            grad_rms: l.grad_rms,
        })
        .collect();
    Ok((layers, rep.total_l2))
}

#[pymodule]
fn pointxfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyProbeResult>()?;
    m.add_class::<PyLayerNorm>()?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(pca_normals, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(point_info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(shape_info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(normal_regul_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_function(wrap_pyfunction!(layer_probe, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_norms, m)?)?;
    Ok(())
}
