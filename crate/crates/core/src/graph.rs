//! Laplacian sub-graph encoding, vocabulary gating and unsupervised relation linking.
//!
//! Every node and edge of a k-hop sub-graph gets a feature (the cosine between
//! the query and the element's label), which is propagated once with the
//! row-normalised `D^-1 (A + I)` operator. The resulting per-element scores are
//! mapped onto the relation segment of the output vocabulary as a gate.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::dataset::Vocabulary;
use crate::embeddings::{cosine, StaticEmbeddings};
use crate::error::{Error, Result};
use crate::kg::{label_tokens, Element, EntityId, KnowledgeGraph, RelationId, SubGraph};

/// One feature per sub-graph element, in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

/// Propagated scores, one per sub-graph element.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEncoding(pub Vec<f64>);

/// Multiplicative gate over the whole output vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabGate(pub Vec<f64>);

impl VocabGate {
    /// Gate that leaves every token untouched.
    pub fn identity(len: usize) -> Self {
        VocabGate(vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cosine between the mean query embedding and the mean embedding of each
/// element label (split on `_`). Zero when either side has no known token.
pub fn feature_similarity<S: AsRef<str>>(
    query: &[S],
    sub: &SubGraph,
    kg: &KnowledgeGraph,
    embeddings: &StaticEmbeddings,
) -> FeatureVector {
    let Some(q) = embeddings.mean(query) else {
        return FeatureVector(vec![0.0; sub.index_size()]);
    };
    let values = (0..sub.index_size())
        .map(|row| {
            let label = sub.element_label(kg, row);
            embeddings
                .mean(&label_tokens(label))
                .map_or(0.0, |l| cosine(&q, &l))
        })
        .collect();
    FeatureVector(values)
}

/// `D^-1 (A + I) f` over the combined node+edge index.
pub fn graph_encode(sub: &SubGraph, f: &FeatureVector) -> Result<GraphEncoding> {
    if f.0.len() != sub.index_size() {
        return Err(Error::Dimension {
            expected: sub.index_size(),
            actual: f.0.len(),
        });
    }
    let values = (0..sub.index_size())
        .map(|row| {
            let neighbours = sub.neighbors(row);
            let total = f.0[row] + neighbours.iter().map(|&j| f.0[j]).sum::<f64>();
            total / (neighbours.len() + 1) as f64
        })
        .collect();
    Ok(GraphEncoding(values))
}

/// Best score per relation over its edge elements.
pub fn relation_scores(sub: &SubGraph, scores: &[f64]) -> BTreeMap<RelationId, f64> {
    let mut best: BTreeMap<RelationId, f64> = BTreeMap::new();
    for (row, element) in sub.elements().enumerate() {
        if let Element::Edge(_, r) = element {
            let s = scores[row];
            best.entry(r)
                .and_modify(|b| *b = b.max(s))
                .or_insert(s);
        }
    }
    best
}

/// Words pass with 1; relations outside the sub-graph get 0; relations inside
/// carry their best encoding score clamped at 0.
pub fn project_gate(g: &GraphEncoding, sub: &SubGraph, vocab: &Vocabulary) -> VocabGate {
    let mut gate = vec![0.0; vocab.len()];
    gate[..vocab.num_words()].fill(1.0);
    for (r, score) in relation_scores(sub, &g.0) {
        let pos = vocab.relation_position(r);
        if pos < gate.len() {
            gate[pos] = score.max(0.0);
        }
    }
    VocabGate(gate)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedRelation {
    pub relation: RelationId,
    pub label: String,
    pub score: f64,
}

fn rank(kg: &KnowledgeGraph, scores: BTreeMap<RelationId, f64>) -> Vec<RankedRelation> {
    let mut ranked: Vec<(RelationId, f64)> = scores.into_iter().collect();
    // descending score, ascending id on ties (the map iterates ids in order and the sort is stable)
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
        .into_iter()
        .map(|(relation, score)| RankedRelation {
            relation,
            label: kg.relation_label(relation).to_string(),
            score,
        })
        .collect()
}

/// Relations of the k-hop sub-graph of `entity`, ranked by propagated score.
pub fn relation_link<S: AsRef<str>>(
    query: &[S],
    kg: &KnowledgeGraph,
    entity: EntityId,
    k: usize,
    embeddings: &StaticEmbeddings,
) -> Result<Vec<RankedRelation>> {
    let sub = kg.k_hop_subgraph(entity, k)?;
    let f = feature_similarity(query, &sub, kg, embeddings);
    let g = graph_encode(&sub, &f)?;
    Ok(rank(kg, relation_scores(&sub, &g.0)))
}

/// Same candidates ranked by raw label similarity, without propagation.
pub fn similarity_link<S: AsRef<str>>(
    query: &[S],
    kg: &KnowledgeGraph,
    entity: EntityId,
    k: usize,
    embeddings: &StaticEmbeddings,
) -> Result<Vec<RankedRelation>> {
    let sub = kg.k_hop_subgraph(entity, k)?;
    let f = feature_similarity(query, &sub, kg, embeddings);
    Ok(rank(kg, relation_scores(&sub, &f.0)))
}
