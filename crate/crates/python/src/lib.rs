//! Python bindings: dataset generation, training, evaluation, and a few metrics.
//!
//! Configs cross the boundary as JSON strings; structured results come back
//! as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cmt_core::dataset::{build_dataset, kind_histogram, validate_manifest, GenerationConfig, Manifest, Split};
use cmt_core::train::{train as fit, DataCache, Model, TrainConfig, TrainOptions};

fn py_err(e: cmt_core::Error) -> PyErr {
    match e {
        cmt_core::Error::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_config<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn parse_split(s: &str) -> PyResult<Split> {
    s.parse().map_err(py_err)
}

/// Generates a dataset under `out` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, seed = 1, config = None))]
fn generate(out: PathBuf, seed: u64, config: Option<&str>) -> PyResult<String> {
    let cfg: GenerationConfig = parse_config(config)?;
    cfg.validate().map_err(py_err)?;
    build_dataset(&cfg, seed, &out).map_err(py_err)?;
    Ok(out.join("manifest.json").to_string_lossy().into_owned())
}

/// Checks a manifest and returns per-split anomaly-kind counts.
#[pyfunction]
fn validate<'py>(py: Python<'py>, manifest: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let m = Manifest::load(&manifest).map_err(py_err)?;
    validate_manifest(&m).map_err(py_err)?;
    let hist: std::collections::BTreeMap<String, [usize; 5]> =
        kind_histogram(&m).into_iter().map(|(s, h)| (s.to_string(), h)).collect();
    to_py(py, &hist)
}

/// Trains on the manifest's train split; returns one dict per epoch.
#[pyfunction]
#[pyo3(signature = (manifest, out, config = None))]
fn train<'py>(py: Python<'py>, manifest: PathBuf, out: PathBuf, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let cfg: TrainConfig = parse_config(config)?;
    cfg.validate().map_err(py_err)?;
    let m = Manifest::load(&manifest).map_err(py_err)?;
    let splits: &[Split] = if cfg.validate { &[Split::Train, Split::Val] } else { &[Split::Train] };
    let data = DataCache::load(&m, splits).map_err(py_err)?;
    let opts = TrainOptions {
        out_dir: Some(out),
        ..Default::default()
    };
    let (_, history) = fit(&data, &cfg, &opts).map_err(py_err)?;
    let rows: Vec<serde_json::Value> = history
        .iter()
        .map(|e| {
            serde_json::json!({
                "epoch": e.epoch,
                "loss_bce": e.loss_bce,
                "loss_qv": e.loss_qv,
                "loss_vv": e.loss_vv,
                "loss_box": e.loss_box,
                "auc_val": e.auc_val,
                "acc_val": e.acc_val,
            })
        })
        .collect();
    to_py(py, &rows)
}

/// Scores a split with a checkpoint; returns the evaluation report.
#[pyfunction]
#[pyo3(signature = (manifest, ckpt, split = "test"))]
fn evaluate<'py>(py: Python<'py>, manifest: PathBuf, ckpt: PathBuf, split: &str) -> PyResult<Bound<'py, PyAny>> {
    let split = parse_split(split)?;
    let (model, _, _) = Model::load(&ckpt).map_err(py_err)?;
    let m = Manifest::load(&manifest).map_err(py_err)?;
    let data = DataCache::load(&m, &[split]).map_err(py_err)?;
    let (report, _) = cmt_core::eval::evaluate(&model, &data, split).map_err(py_err)?;
    to_py(py, &report)
}

/// ROC AUC with ties counted half.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    cmt_core::eval::auc(&scores, &labels).map_err(py_err)
}

/// `1 - GIoU` of two `(cx, cy, w, h)` boxes.
#[pyfunction]
fn giou_loss(pred: [f64; 4], gt: [f64; 4]) -> PyResult<f64> {
    cmt_core::train::giou_loss(pred, gt).map_err(py_err)
}

#[pymodule]
fn cmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(giou_loss, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
