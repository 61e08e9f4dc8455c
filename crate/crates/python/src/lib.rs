//! Python bindings: knowledge graph, lexical substitution, Laplacian relation
//! linking, metrics and checkpoint inference.

use std::collections::BTreeSet;
use std::path::Path;

use kgirnet::cli::{run_job, TrainJob};

use kgirnet::dataset as ds;
use kgirnet::embeddings::StaticEmbeddings;
use kgirnet::graph::{self, FeatureVector};
use kgirnet::kg::{EntityId, KnowledgeGraph as Kg};
use kgirnet::model::{Generation, KgirNet};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: kgirnet::Error) -> PyErr {
    match e {
        kgirnet::Error::NotFound { .. } => PyKeyError::new_err(e.to_string()),
        kgirnet::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "KnowledgeGraph", module = "kgirnet")]
pub struct KnowledgeGraph {
    inner: Kg,
}

impl KnowledgeGraph {
    fn entity(&self, label: &str) -> PyResult<EntityId> {
        self.inner.require_entity(label).map_err(to_py)
    }
}

#[pymethods]
impl KnowledgeGraph {
    #[new]
    #[pyo3(signature = (triples = Vec::new()))]
    fn new(triples: Vec<(String, String, String)>) -> Self {
        Self {
            inner: Kg::from_triples(triples.iter().map(|(s, r, o)| (s.as_str(), r.as_str(), o.as_str()))),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Kg::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn add(&mut self, subject: &str, relation: &str, object: &str) -> bool {
        self.inner.insert(subject, relation, object)
    }

    #[getter]
    fn num_triples(&self) -> usize {
        self.inner.num_triples()
    }

    #[getter]
    fn num_entities(&self) -> usize {
        self.inner.num_entities()
    }

    #[getter]
    fn num_relations(&self) -> usize {
        self.inner.num_relations()
    }

    fn triples(&self) -> Vec<(String, String, String)> {
        self.inner
            .triples()
            .iter()
            .map(|t| {
                (
                    self.inner.entity_label(t.subject).to_string(),
                    self.inner.relation_label(t.relation).to_string(),
                    self.inner.entity_label(t.object).to_string(),
                )
            })
            .collect()
    }

    /// Objects of `(entity, relation)`, sorted.
    fn lookup(&self, entity: &str, relation: &str) -> PyResult<Vec<String>> {
        let e = self.entity(entity)?;
        let r = self.inner.require_relation(relation).map_err(to_py)?;
        Ok(self.inner.lookup(e, r).into_iter().map(str::to_string).collect())
    }

    /// Relation labels of the k-hop sub-graph around `entity`.
    #[pyo3(signature = (entity, k = 2))]
    fn subgraph_relations(&self, entity: &str, k: usize) -> PyResult<Vec<String>> {
        let sub = self.inner.k_hop_subgraph(self.entity(entity)?, k).map_err(to_py)?;
        Ok(sub.relations().into_iter().map(|r| self.inner.relation_label(r).to_string()).collect())
    }

    /// Labels of the sub-graph's node+edge index, in index order.
    #[pyo3(signature = (entity, k = 2))]
    fn subgraph_index(&self, entity: &str, k: usize) -> PyResult<Vec<String>> {
        let sub = self.inner.k_hop_subgraph(self.entity(entity)?, k).map_err(to_py)?;
        Ok((0..sub.index_size()).map(|i| sub.element_label(&self.inner, i).to_string()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.num_triples()
    }

    fn __repr__(&self) -> String {
        format!(
            "KnowledgeGraph(triples={}, entities={}, relations={})",
            self.inner.num_triples(),
            self.inner.num_entities(),
            self.inner.num_relations()
        )
    }
}

#[pyclass(name = "Embeddings", module = "kgirnet")]
pub struct Embeddings {
    inner: StaticEmbeddings,
}

#[pymethods]
impl Embeddings {
    #[new]
    fn new(vectors: Vec<(String, Vec<f64>)>) -> PyResult<Self> {
        Ok(Self {
            inner: StaticEmbeddings::from_pairs(vectors).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: StaticEmbeddings::load(path).map_err(to_py)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    ds::tokenize(text)
}

/// Replaces object mentions of `entity` with relation tokens.
#[pyfunction]
fn delexicalize(tokens: Vec<String>, entity: &str, kg: &KnowledgeGraph) -> PyResult<Vec<String>> {
    Ok(ds::delexicalize(&tokens, kg.entity(entity)?, &kg.inner, None))
}

/// Resolves relation tokens against `entity`; returns `(tokens, unresolved)`.
#[pyfunction]
fn relexicalize(tokens: Vec<String>, entity: &str, kg: &KnowledgeGraph) -> PyResult<(Vec<String>, Vec<String>)> {
    let r = ds::relexicalize(&tokens, kg.entity(entity)?, &kg.inner);
    Ok((r.tokens, r.unresolved))
}

/// One propagation step over the sub-graph index of `entity`.
#[pyfunction]
#[pyo3(signature = (kg, entity, features, k = 2))]
fn graph_encode(kg: &KnowledgeGraph, entity: &str, features: Vec<f64>, k: usize) -> PyResult<Vec<f64>> {
    let sub = kg.inner.k_hop_subgraph(kg.entity(entity)?, k).map_err(to_py)?;
    Ok(graph::graph_encode(&sub, &FeatureVector(features)).map_err(to_py)?.0)
}

/// Relations around `entity` ranked for `query`, as `(label, score)` pairs.
#[pyfunction]
#[pyo3(signature = (kg, embeddings, entity, query, k = 2, propagate = true))]
fn relation_link(
    kg: &KnowledgeGraph,
    embeddings: &Embeddings,
    entity: &str,
    query: &str,
    k: usize,
    propagate: bool,
) -> PyResult<Vec<(String, f64)>> {
    let e = kg.entity(entity)?;
    let q = ds::tokenize(query);
    let ranked = if propagate {
        graph::relation_link(&q, &kg.inner, e, k, &embeddings.inner)
    } else {
        graph::similarity_link(&q, &kg.inner, e, k, &embeddings.inner)
    }
    .map_err(to_py)?;
    Ok(ranked.into_iter().map(|r| (r.label, r.score)).collect())
}

fn split_all(texts: Vec<String>) -> Vec<Vec<String>> {
    texts.iter().map(|t| ds::tokenize(t)).collect()
}

/// Corpus BLEU-4 in percent over whitespace/punctuation tokenised strings.
#[pyfunction]
fn bleu(candidates: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    if candidates.len() != references.len() {
        return Err(PyValueError::new_err("candidates and references differ in length"));
    }
    Ok(kgirnet::eval::bleu(&split_all(candidates), &split_all(references)))
}

/// Mean sentence METEOR in percent.
#[pyfunction]
fn meteor(candidates: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    if candidates.len() != references.len() {
        return Err(PyValueError::new_err("candidates and references differ in length"));
    }
    Ok(kgirnet::eval::meteor(&split_all(candidates), &split_all(references)))
}

#[pyfunction]
fn entity_f1(predicted: BTreeSet<String>, gold: BTreeSet<String>) -> f64 {
    kgirnet::eval::entity_f1(&predicted, &gold)
}

fn generation_dict<'py>(py: Python<'py>, g: &Generation) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("response", g.text())?;
    d.set_item("intermediate", g.intermediate.join(" "))?;
    d.set_item("entity", &g.entity)?;
    d.set_item("confidence", g.confidence)?;
    d.set_item("low_confidence", g.low_confidence)?;
    d.set_item("relations", &g.relations)?;
    d.set_item("objects", &g.objects)?;
    d.set_item("unresolved", &g.unresolved)?;
    d.set_item("subgraph_relations", &g.subgraph_relations)?;
    d.set_item("finished", g.finished)?;
    d.set_item("log_prob", g.log_prob)?;
    Ok(d)
}

/// A trained checkpoint.
#[pyclass(name = "Model", module = "kgirnet")]
pub struct Model {
    inner: KgirNet,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(py: Python<'_>, path: &str) -> PyResult<Self> {
        let inner = py.detach(|| KgirNet::load(path)).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Replies to `query` given earlier utterances (alternating user/system).
    #[pyo3(signature = (query, history = Vec::new(), beam_width = None))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        query: &str,
        history: Vec<String>,
        beam_width: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let history = split_all(history);
        let q = ds::tokenize(query);
        let width = beam_width.unwrap_or(self.inner.config.beam_width);
        let g = py
            .detach(|| self.inner.generate_with(&history, &q, width))
            .map_err(to_py)?;
        generation_dict(py, &g)
    }

    #[getter]
    fn entities(&self) -> Vec<String> {
        self.inner
            .entities()
            .iter()
            .map(|&e| self.inner.kg.entity_label(e).to_string())
            .collect()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    fn knowledge_graph(&self) -> KnowledgeGraph {
        KnowledgeGraph {
            inner: self.inner.kg.clone(),
        }
    }
}

/// Runs a training job given as JSON (the CLI job-file format); relative
/// paths resolve against `workdir`. Returns the training summary.
#[pyfunction]
#[pyo3(signature = (job, workdir = "."))]
fn train<'py>(py: Python<'py>, job: &str, workdir: &str) -> PyResult<Bound<'py, PyDict>> {
    let job: TrainJob = serde_json::from_str(job).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let s = py.detach(|| run_job(&job, Path::new(workdir))).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("output", s.output.display().to_string())?;
    d.set_item("epochs", s.epochs)?;
    d.set_item("steps", s.steps)?;
    d.set_item("final_train_loss", s.final_train_loss)?;
    d.set_item("best_valid_entity_f1", s.best_valid_entity_f1)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "kgirnet")]
fn kgirnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<KnowledgeGraph>()?;
    m.add_class::<Embeddings>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(delexicalize, m)?)?;
    m.add_function(wrap_pyfunction!(relexicalize, m)?)?;
    m.add_function(wrap_pyfunction!(graph_encode, m)?)?;
    m.add_function(wrap_pyfunction!(relation_link, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(entity_f1, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
