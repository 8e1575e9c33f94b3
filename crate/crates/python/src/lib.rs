//! Python bindings for `swig-core`.
//!
//! Structured results (reports, statistics, graphs) are returned as plain
//! Python dicts and lists with the same layout as the CLI's JSON output.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use swig_core::chaining::{chain as chain_nodes, load_situations, DEFAULT_SPATIAL_IOU};
use swig_core::dataset::{compute_stats, load_dataset_with, load_predictions, prediction_to_json, LoadOptions};
use swig_core::fusion::{assign_groundings, load_detections, DEFAULT_FUSION_THRESHOLD};
use swig_core::geometry::{self, ScoredBox};
use swig_core::loss::{self, FocalParams, LossParts, SmoothingParams};
use swig_core::metrics::{self, EvalOptions, ValueAllMode, VerbSetting};
use swig_core::retrieval;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels.
#[pyclass(frozen, eq, skip_from_py_object, name = "BoundingBox")]
#[derive(Clone, Copy, PartialEq)]
struct PyBox(swig_core::BoundingBox);

#[pymethods]
impl PyBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        swig_core::BoundingBox::new(x1, y1, x2, y2).map(PyBox).map_err(err)
    }

    #[getter]
    fn coords(&self) -> (f64, f64, f64, f64) {
        let [a, b, c, d] = self.0.coords();
        (a, b, c, d)
    }

    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn iou(&self, other: &PyBox) -> f64 {
        geometry::iou(&self.0, &other.0)
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.coords();
        format!("BoundingBox({a}, {b}, {c}, {d})")
    }
}

fn boxes_from(coords: Vec<(f64, f64, f64, f64)>) -> PyResult<Vec<swig_core::BoundingBox>> {
    coords
        .into_iter()
        .map(|(a, b, c, d)| swig_core::BoundingBox::new(a, b, c, d).map_err(err))
        .collect()
}

/// Verb lexicon: each verb with its ordered role list.
#[pyclass(frozen, name = "VerbLexicon")]
struct PyLexicon(swig_core::VerbLexicon);

#[pymethods]
impl PyLexicon {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        swig_core::VerbLexicon::from_json(text).map(PyLexicon).map_err(err)
    }

    fn verbs(&self) -> Vec<String> {
        self.0.iter().map(|e| e.verb.clone()).collect()
    }

    fn roles(&self, verb: &str) -> PyResult<Vec<String>> {
        self.0.entry(verb).map(|e| e.roles.clone()).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __contains__(&self, verb: &str) -> bool {
        self.0.contains(verb)
    }
}

/// A loaded and validated annotation set.
#[pyclass(frozen, name = "Dataset")]
struct PyDataset(swig_core::dataset::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (annotations, lexicon, vocabulary = None, relax_worker_count = false))]
    fn load(annotations: &str, lexicon: &PyLexicon, vocabulary: Option<&str>, relax_worker_count: bool) -> PyResult<Self> {
        let vocab = vocabulary.map(swig_core::NounVocabulary::from_json).transpose().map_err(err)?;
        let options = LoadOptions {
            relax_worker_count,
            ..LoadOptions::default()
        };
        load_dataset_with(annotations, lexicon.0.clone(), vocab, &options)
            .map(PyDataset)
            .map_err(err)
    }

    fn image_ids(&self) -> Vec<String> {
        self.0.images.iter().map(|i| i.image_id.clone()).collect()
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &compute_stats(&self.0))
    }

    /// Scores predictions under one setting (`top1`, `top5`, `gt`) or all three.
    #[pyo3(signature = (predictions, setting = "all", value_all_mode = "any-per-role"))]
    fn evaluate(&self, py: Python<'_>, predictions: &str, setting: &str, value_all_mode: &str) -> PyResult<Py<PyAny>> {
        let preds = load_predictions(predictions, &self.0.lexicon).map_err(err)?;
        let settings: Vec<VerbSetting> = if setting == "all" {
            VerbSetting::ALL.to_vec()
        } else {
            vec![setting.parse().map_err(err)?]
        };
        let mode: ValueAllMode = value_all_mode.parse().map_err(err)?;
        let options = EvalOptions { value_all_mode: mode };
        let reports = settings
            .into_iter()
            .map(|s| metrics::evaluate(&self.0, &preds, s, &options))
            .collect::<swig_core::Result<Vec<_>>>()
            .map_err(err)?;
        to_py(py, &reports)
    }

    fn __len__(&self) -> usize {
        self.0.images.len()
    }
}

#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> PyResult<f64> {
    let v = boxes_from(vec![a, b])?;
    Ok(geometry::iou(&v[0], &v[1]))
}

/// Indices of the boxes kept by greedy non-maximum suppression.
#[pyfunction]
#[pyo3(signature = (boxes, scores, iou_threshold, keep = None))]
fn nms(boxes: Vec<(f64, f64, f64, f64)>, scores: Vec<f64>, iou_threshold: f64, keep: Option<usize>) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let cands = boxes_from(boxes)?
        .into_iter()
        .zip(scores)
        .map(|(b, s)| ScoredBox::new(b, s).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    geometry::nms(&cands, iou_threshold, keep.unwrap_or(usize::MAX)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (boxes, k, seed = 0))]
fn cluster_aspect_ratios(boxes: Vec<(f64, f64, f64, f64)>, k: usize, seed: u64) -> PyResult<Vec<f64>> {
    geometry::cluster_aspect_ratios(&boxes_from(boxes)?, k, seed).map_err(err)
}

#[pyfunction]
fn focal_loss(logits: Vec<f64>, targets: Vec<u8>, alpha: f64, gamma: f64) -> PyResult<(f64, Vec<f64>)> {
    let params = FocalParams::new(alpha, gamma).map_err(err)?;
    loss::focal_loss(&logits, &targets, params).map_err(err)
}

#[pyfunction]
fn smoothed_ce(logits: Vec<f64>, target: usize, epsilon: f64) -> PyResult<(f64, Vec<f64>)> {
    let params = SmoothingParams::new(epsilon).map_err(err)?;
    loss::smoothed_ce(&logits, target, params).map_err(err)
}

#[pyfunction]
fn l1_reg(pred: Vec<f64>, target: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    loss::l1_reg(&pred, &target).map_err(err)
}

#[pyfunction]
fn total_loss(reg: f64, class_focal: f64, verb_ce: f64, ground_ce: f64, noun_ce: [f64; 3]) -> PyResult<f64> {
    let parts = LossParts::new(reg, class_focal, verb_ce, ground_ce, noun_ce).map_err(err)?;
    Ok(loss::total_loss(&parts))
}

#[pyfunction]
#[pyo3(signature = (instances = 100, seed = 0))]
fn gradient_suite(py: Python<'_>, instances: usize, seed: u64) -> PyResult<Py<PyAny>> {
    to_py(py, &loss::gradient_suite(instances, seed).map_err(err)?)
}

/// Grounds each role of every prediction frame from a detection file.
#[pyfunction]
#[pyo3(signature = (predictions, detections, lexicon, threshold = DEFAULT_FUSION_THRESHOLD))]
fn fuse(py: Python<'_>, predictions: &str, detections: &str, lexicon: &PyLexicon, threshold: f64) -> PyResult<Py<PyAny>> {
    let mut records = load_predictions(predictions, &lexicon.0).map_err(err)?;
    let dets = load_detections(detections).map_err(err)?;
    let mut out = Vec::with_capacity(records.len());
    for rec in &mut records {
        let set = dets
            .get(&rec.image_id)
            .ok_or_else(|| PyValueError::new_err(format!("no detections for image `{}`", rec.image_id)))?;
        for frame in rec.frames.values_mut() {
            *frame = assign_groundings(frame, set, threshold).map_err(err)?;
        }
        out.push(prediction_to_json(rec));
    }
    to_py(py, &out)
}

/// `(sit_sim, gr_sit_sim)` between the predictions for images `a` and `b`,
/// each built from its top five verbs.
#[pyfunction]
fn situation_similarity(predictions: &str, a: &str, b: &str, lexicon: &PyLexicon) -> PyResult<(f64, f64)> {
    let records = load_predictions(predictions, &lexicon.0).map_err(err)?;
    let find = |id: &str| {
        let rec = records
            .iter()
            .find(|r| r.image_id == id)
            .ok_or_else(|| PyValueError::new_err(format!("no prediction for image `{id}`")))?;
        retrieval::SituationPrediction::from_record(rec, &lexicon.0).map_err(err)
    };
    let (sa, sb) = (find(a)?, find(b)?);
    Ok((retrieval::sit_sim(&sa, &sb), retrieval::gr_sit_sim(&sa, &sb)))
}

#[pyfunction]
#[pyo3(signature = (situations, lexicon, spatial_iou = DEFAULT_SPATIAL_IOU, require_noun_match = false))]
fn chain(py: Python<'_>, situations: &str, lexicon: &PyLexicon, spatial_iou: f64, require_noun_match: bool) -> PyResult<Py<PyAny>> {
    let nodes = load_situations(situations, &lexicon.0).map_err(err)?;
    to_py(py, &chain_nodes(nodes, spatial_iou, require_noun_match).to_json())
}

#[pymodule]
fn pyswig(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCHEMA_VERSION", swig_core::SCHEMA_VERSION)?;
    m.add_class::<PyBox>()?;
    m.add_class::<PyLexicon>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_aspect_ratios, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_ce, m)?)?;
    m.add_function(wrap_pyfunction!(l1_reg, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(situation_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(chain, m)?)?;
    Ok(())
}
