//! Python bindings: model building and inference, the loss and metric
//! functions, synthetic data and the ablation runner.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use ugda_seg::ablation::{self, emit_table as emit, Preset, RunManifest, TableRow};
use ugda_seg::data::discover_dataset;
use ugda_seg::loss::{self, LossConfig};
use ugda_seg::metrics;
use ugda_seg::model::{build_variant, Backbone, BuildOptions, Mode, SegmentationModel, Variant, VariantConfig};
use ugda_seg::supervision::{self, DsConfig};
use ugda_seg::train::load_checkpoint;
use ugda_seg::SegError;

fn py_err(e: SegError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn flat(t: &Tensor) -> PyResult<Vec<f32>> {
    t.flatten_all().and_then(|t| t.to_dtype(DType::F32)).and_then(|t| t.to_vec1::<f32>()).map_err(tensor_err)
}

fn mask(rows: Vec<Vec<u8>>) -> PyResult<Array3<u8>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask rows differ in length"));
    }
    let data: Vec<u8> = rows.into_iter().flatten().map(|v| u8::from(v != 0)).collect();
    Ok(Array3::from_shape_vec((1, h, w), data).expect("checked shape"))
}

/// A segmentation network for one backbone/variant pair.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: SegmentationModel,
    side: Option<usize>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (backbone, variant, seed = 42))]
    fn new(backbone: &str, variant: &str, seed: u64) -> PyResult<Self> {
        let b: Backbone = backbone.parse().map_err(py_err)?;
        let v: Variant = variant.parse().map_err(py_err)?;
        let inner = build_variant(&VariantConfig::new(b, v), &BuildOptions { seed, ..BuildOptions::default() })
            .map_err(py_err)?;
        Ok(Self { inner, side: None })
    }

    /// Restores a `*_best.ckpt` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, meta) = load_checkpoint(&path, &BuildOptions::default()).map_err(py_err)?;
        Ok(Self { inner, side: Some(meta.side) })
    }

    #[getter]
    fn backbone(&self) -> &'static str {
        self.inner.config().backbone.key()
    }

    #[getter]
    fn variant(&self) -> Option<&'static str> {
        self.inner.config().variant().map(Variant::key)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn num_attention_modules(&self) -> usize {
        self.inner.attention_modules().len()
    }

    #[getter]
    fn num_aux_heads(&self) -> usize {
        self.inner.num_aux_heads()
    }

    /// Input side recorded in the checkpoint, if loaded from one.
    #[getter]
    fn side(&self) -> Option<usize> {
        self.side
    }

    fn set_gamma(&self, value: f64) -> PyResult<()> {
        self.inner.set_gamma(value).map_err(py_err)
    }

    /// Runs a flat row-major `(N,3,H,W)` batch; returns the main logits and
    /// the auxiliary logits (train mode only), each flat `(N,1,H,W)`.
    #[pyo3(signature = (images, shape, train = false))]
    fn forward(
        &self,
        images: Vec<f32>,
        shape: (usize, usize, usize, usize),
        train: bool,
    ) -> PyResult<(Vec<f32>, Vec<Vec<f32>>)> {
        let x = Tensor::from_vec(images, shape, &Device::Cpu).map_err(tensor_err)?;
        let mode = if train { Mode::Train } else { Mode::Eval };
        let out = self.inner.forward(&x, mode).map_err(py_err)?;
        let aux = out.aux_logits.iter().map(flat).collect::<PyResult<Vec<_>>>()?;
        Ok((flat(&out.main_logits)?, aux))
    }

    /// Mean `(dsc, iou)` over every pair in an `images/` + `masks/` directory.
    #[pyo3(signature = (data_dir, side = None, threshold = 0.5))]
    fn evaluate(&self, data_dir: PathBuf, side: Option<usize>, threshold: f64) -> PyResult<(f64, f64)> {
        let side = side.or(self.side).unwrap_or(ugda_seg::data::DEFAULT_SIDE);
        let pairs = discover_dataset(&data_dir).map_err(py_err)?;
        let examples = ablation::eval_examples(&pairs, side).map_err(py_err)?;
        let record = metrics::evaluate(&self.inner, &examples, threshold).map_err(py_err)?;
        Ok((record.mean_dsc, record.mean_iou))
    }
}

#[pyfunction]
fn dice_score(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    metrics::dice_score(&mask(pred)?, &mask(gt)?).map_err(py_err)
}

#[pyfunction]
fn iou_score(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    metrics::iou_score(&mask(pred)?, &mask(gt)?).map_err(py_err)
}

/// `1 + beta * H(p)` for each probability.
#[pyfunction]
#[pyo3(signature = (probs, beta = 0.3, eps = 1e-7))]
fn entropy_weight_map(probs: Vec<f64>, beta: f64, eps: f64) -> PyResult<Vec<f64>> {
    let n = probs.len();
    let p = Tensor::from_vec(probs, n, &Device::Cpu).map_err(tensor_err)?;
    let w = loss::entropy_weight_map(&p, beta, eps).map_err(py_err)?;
    w.to_vec1::<f64>().map_err(tensor_err)
}

/// Entropy-weighted BCE plus soft Dice over one flat logit map.
#[pyfunction]
#[pyo3(signature = (logits, target, beta = 0.3))]
fn hybrid_loss(logits: Vec<f64>, target: Vec<f64>, beta: f64) -> PyResult<f64> {
    if logits.len() != target.len() {
        return Err(PyValueError::new_err("logits and target differ in length"));
    }
    let n = logits.len();
    let z = Tensor::from_vec(logits, (1, 1, 1, n), &Device::Cpu).map_err(tensor_err)?;
    let t = Tensor::from_vec(target, (1, 1, 1, n), &Device::Cpu).map_err(tensor_err)?;
    let cfg = LossConfig { beta, ..LossConfig::default() };
    let l = loss::hybrid_loss(&z, &t, &cfg).map_err(py_err)?;
    l.to_scalar::<f64>().map_err(tensor_err)
}

/// Main loss plus `alpha` times the weighted auxiliary losses.
#[pyfunction]
#[pyo3(signature = (main, aux, alpha = 0.05))]
fn total_loss(main: f64, aux: Vec<f64>, alpha: f64) -> PyResult<f64> {
    supervision::total_loss(main, &aux, &DsConfig { alpha, ..DsConfig::default() }).map_err(py_err)
}

/// `(csv, markdown)` for `(backbone, variant, dsc, iou)` rows.
#[pyfunction]
fn emit_table(rows: Vec<(String, String, f64, f64)>) -> PyResult<(String, String)> {
    let rows = rows
        .into_iter()
        .map(|(b, v, dsc, iou)| Ok(TableRow { backbone: b.parse()?, variant: v.parse()?, dsc, iou }))
        .collect::<Result<Vec<_>, SegError>>()
        .map_err(py_err)?;
    let table = emit(&rows).map_err(py_err)?;
    Ok((table.csv, table.text))
}

/// Writes `count` synthetic image/mask pairs under `root`; returns their ids.
#[pyfunction]
#[pyo3(signature = (root, count, side = 256, seed = 42))]
fn write_synthetic_dataset(root: PathBuf, count: usize, side: usize, seed: u64) -> PyResult<Vec<String>> {
    let pairs = ugda_seg::synthetic::write_synthetic_dataset(&root, count, side, seed).map_err(py_err)?;
    Ok(pairs.into_iter().map(|p| p.id).collect())
}

/// Runs a preset ablation into `out_dir`; returns the split hash and the
/// `(backbone, variant, dsc, iou)` rows.
#[pyfunction]
#[pyo3(signature = (out_dir, preset = "desk", backbones = None, variants = None, epochs = None, synthetic = None, side = None))]
fn run_ablation(
    py: Python<'_>,
    out_dir: PathBuf,
    preset: &str,
    backbones: Option<Vec<String>>,
    variants: Option<Vec<String>>,
    epochs: Option<usize>,
    synthetic: Option<usize>,
    side: Option<usize>,
) -> PyResult<(String, Vec<(String, String, f64, f64)>)> {
    let preset: Preset = preset.parse().map_err(py_err)?;
    let mut m = RunManifest::preset(preset, out_dir);
    if let Some(b) = backbones {
        m.backbones = b.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(py_err)?;
    }
    if let Some(v) = variants {
        m.variants = v.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(py_err)?;
    }
    if let Some(e) = epochs {
        m.train.epochs = e;
    }
    if let Some(s) = side {
        m.side = s;
    }
    if let Some(count) = synthetic {
        m.data = ablation::DataSource::Synthetic { count, side: m.side };
    }
    let outcome = py.detach(|| ablation::run_ablation(&m)).map_err(py_err)?;
    if let Some(f) = outcome.failures.first() {
        return Err(PyValueError::new_err(format!("{}_{} failed: {}", f.backbone.key(), f.variant.key(), f.error)));
    }
    let rows = outcome
        .records
        .iter()
        .map(|r| (r.backbone.key().to_string(), r.variant.key().to_string(), r.dsc, r.iou))
        .collect();
    Ok((outcome.split_hash, rows))
}

#[pymodule]
fn ugda_seg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(iou_score, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_weight_map, m)?)?;
    m.add_function(wrap_pyfunction!(hybrid_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(emit_table, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_ablation, m)?)?;
    Ok(())
}
