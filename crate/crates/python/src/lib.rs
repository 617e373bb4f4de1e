use std::path::PathBuf;

use perspective_core::calibrate::{self, DevItem, ThresholdMode};
use perspective_core::corpus::{self, LabelSet, Split};
use perspective_core::explainer::{Decoding, ExplainerModel};
use perspective_core::metrics::{self, UndefinedClass};
use perspective_core::passport::PassportClassifier;
use perspective_core::pipeline::{self, RunConfig};
use perspective_core::synth::SyntheticSpec;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(perspective, PerspectiveError, PyException);

fn err(e: perspective_core::Error) -> PyErr {
    PerspectiveError::new_err(format!("{}: {e}", e.kind()))
}

/// Serializes through JSON into native Python objects.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn label_set(s: &str) -> PyResult<LabelSet> {
    LabelSet::parse(s).ok_or_else(|| PyValueError::new_err(format!("invalid label set {s:?}")))
}

fn split(s: &str) -> PyResult<Split> {
    Split::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown split {s:?}")))
}

#[pyclass(name = "Corpus", module = "perspective")]
struct PyCorpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus { inner: corpus::load_corpus(path).map_err(err)? })
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(PyCorpus { inner: corpus::Corpus::parse_jsonl(text).map_err(err)? })
    }

    /// Rule-based persona corpus; returns `(corpus, answer_key)`.
    #[staticmethod]
    #[pyo3(signature = (n_instances=200, seed=7))]
    fn synthetic(py: Python<'_>, n_instances: usize, seed: u64) -> PyResult<(Self, Py<PyAny>)> {
        let spec = SyntheticSpec { n_instances, seed, ..SyntheticSpec::default() };
        let (c, key) = spec.generate().map_err(err)?;
        Ok((PyCorpus { inner: c }, to_py(py, &key)?))
    }

    fn __len__(&self) -> usize {
        self.inner.instances().len()
    }

    fn annotator_ids(&self) -> Vec<String> {
        self.inner.annotator_ids()
    }

    #[pyo3(signature = (split_name=None))]
    fn instance_ids(&self, split_name: Option<&str>) -> PyResult<Vec<String>> {
        Ok(match split_name {
            Some(s) => self.inner.split(split(s)?).map(|i| i.id.clone()).collect(),
            None => self.inner.instances().iter().map(|i| i.id.clone()).collect(),
        })
    }

    fn instance(&self, py: Python<'_>, id: &str) -> PyResult<Py<PyAny>> {
        match self.inner.instance(id) {
            Some(i) => {
                let judgments: Vec<_> = i
                    .judgments
                    .iter()
                    .map(|j| serde_json::json!({"annotator_id": j.annotator_id, "pairs": j.pairs}))
                    .collect();
                to_py(
                    py,
                    &serde_json::json!({
                        "id": i.id,
                        "split": i.split,
                        "context": i.context,
                        "statement": i.statement,
                        "judgments": judgments,
                    }),
                )
            }
            None => Err(PyValueError::new_err(format!("no instance {id:?}"))),
        }
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.stats())
    }

    fn stats_table(&self) -> String {
        self.inner.stats().render_table()
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }
}

#[pyclass(name = "Classifier", module = "perspective")]
struct PyClassifier {
    inner: PassportClassifier,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyClassifier { inner: PassportClassifier::load(path).map_err(err)? })
    }

    fn annotator_ids(&self) -> Vec<String> {
        self.inner.annotator_ids()
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Per-annotator `[p_C, p_E, p_N]`, in `annotator_ids()` order.
    fn predict(&self, context: &str, statement: &str) -> PyResult<Vec<[f64; 3]>> {
        self.inner.predict(context, statement).map_err(err)
    }

    #[pyo3(signature = (context, statement, tau=[0.5, 0.5, 0.5]))]
    fn predict_labels(&self, context: &str, statement: &str, tau: [f64; 3]) -> PyResult<Vec<(String, String)>> {
        let probs = self.inner.predict(context, statement).map_err(err)?;
        Ok(self
            .inner
            .annotator_ids()
            .into_iter()
            .zip(probs)
            .map(|(a, p)| (a, calibrate::predict_label_set(p, tau).to_string()))
            .collect())
    }
}

#[pyclass(name = "Explainer", module = "perspective")]
struct PyExplainer {
    inner: ExplainerModel,
}

#[pymethods]
impl PyExplainer {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyExplainer { inner: ExplainerModel::load(path).map_err(err)? })
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[pyo3(signature = (classifier, corpus, instance_id, annotator_id, beam=None))]
    fn generate(
        &self,
        py: Python<'_>,
        classifier: &PyClassifier,
        corpus: &PyCorpus,
        instance_id: &str,
        annotator_id: &str,
        beam: Option<usize>,
    ) -> PyResult<Py<PyAny>> {
        let inst = corpus
            .inner
            .instance(instance_id)
            .ok_or_else(|| PyValueError::new_err(format!("no instance {instance_id:?}")))?;
        let decoding = match beam {
            Some(width) => Decoding::Beam { width },
            None => Decoding::Greedy,
        };
        let g = self.inner.generate(&classifier.inner, inst, annotator_id, decoding).map_err(err)?;
        to_py(py, &g)
    }
}

#[pyfunction]
fn jaccard(predicted: &str, gold: &str) -> PyResult<f64> {
    Ok(metrics::jaccard(label_set(predicted)?, label_set(gold)?))
}

fn pairs(items: Vec<(String, String)>) -> PyResult<Vec<(LabelSet, LabelSet)>> {
    items.iter().map(|(p, g)| Ok((label_set(p)?, label_set(g)?))).collect()
}

#[pyfunction]
fn exact_match_rate(items: Vec<(String, String)>) -> PyResult<f64> {
    metrics::exact_match_rate(&pairs(items)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (items, zero_fill=false))]
fn macro_f1(items: Vec<(String, String)>, zero_fill: bool) -> PyResult<f64> {
    let policy = if zero_fill { UndefinedClass::ZeroFill } else { UndefinedClass::Exclude };
    metrics::macro_f1(&pairs(items)?, policy).map_err(err)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> PyResult<f64> {
    metrics::rouge_l(candidate, reference).map_err(err)
}

/// Grid search over dev `(probs, gold)` pairs.
#[pyfunction]
#[pyo3(signature = (probs, gold, mode="per_class", step=0.05))]
fn tune_thresholds(py: Python<'_>, probs: Vec<[f64; 3]>, gold: Vec<String>, mode: &str, step: f64) -> PyResult<Py<PyAny>> {
    if probs.len() != gold.len() {
        return Err(PyValueError::new_err("probs and gold differ in length"));
    }
    let mode = ThresholdMode::parse(mode).ok_or_else(|| PyValueError::new_err(format!("unknown mode {mode:?}")))?;
    let items = probs
        .into_iter()
        .zip(&gold)
        .map(|(p, g)| Ok(DevItem { probs: p, gold: label_set(g)? }))
        .collect::<PyResult<Vec<_>>>()?;
    to_py(py, &calibrate::tune_thresholds(&items, mode, step).map_err(err)?)
}

/// Every pipeline stage; synthesizes a corpus unless the config names one.
#[pyfunction]
#[pyo3(signature = (out, config=None, seed=None))]
fn run_pipeline(py: Python<'_>, out: PathBuf, config: Option<PathBuf>, seed: Option<u64>) -> PyResult<Py<PyAny>> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).map_err(err)?,
        None => RunConfig::default(),
    };
    cfg.out = out;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.model.seed = s;
        cfg.synthetic.seed = s;
    }
    let summary = py.detach(|| pipeline::run_pipeline(&cfg, |_| {})).map_err(err)?;
    to_py(py, &summary)
}

#[pymodule]
fn perspective(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PerspectiveError", m.py().get_type::<PerspectiveError>())?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyExplainer>()?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match_rate, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(tune_thresholds, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
