//! Knowledge graph storage, label function and k-hop neighbourhoods.
//!
//! The graph is a labelled multi-graph. Facts are `(subject, relation, object)`
//! triples; literal objects (numbers, dates, free strings) are interned as
//! entity nodes so every answer a dialogue can mention is a node of the graph.
//! Adjacency ignores direction.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

/// Index of a stored triple; one edge of the multi-graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KgId {
    Entity(EntityId),
    Relation(RelationId),
}

impl From<EntityId> for KgId {
    fn from(id: EntityId) -> Self {
        KgId::Entity(id)
    }
}

impl From<RelationId> for KgId {
    fn from(id: RelationId) -> Self {
        KgId::Relation(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

/// Canonical label form: trimmed, lowercased, inner whitespace runs become `_`.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// Surface tokens of a canonical label (`james_cameron` -> `["james", "cameron"]`).
pub fn label_tokens(label: &str) -> Vec<&str> {
    label.split('_').filter(|t| !t.is_empty()).collect()
}

#[derive(Debug, Clone, Default)]
struct Interner {
    labels: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, label: String) -> u32 {
        if let Some(&id) = self.index.get(&label) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.index.insert(label.clone(), id);
        self.labels.push(label);
        id
    }
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    entities: Interner,
    relations: Interner,
    triples: Vec<Triple>,
    // incident edges per entity, regardless of direction
    incidence: Vec<Vec<EdgeId>>,
    by_subject: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from raw `(subject, relation, object)` labels.
    /// Labels are normalized; duplicate facts are dropped.
    pub fn from_triples<I, S>(triples: I) -> Self
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: AsRef<str>,
    {
        let mut kg = Self::new();
        for (s, r, o) in triples {
            kg.insert(s.as_ref(), r.as_ref(), o.as_ref());
        }
        kg
    }

    /// Reads a tab-separated triple file, one fact per line. Blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kg = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if fields.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: "empty field".into(),
                });
            }
            kg.insert(fields[0], fields[1], fields[2]);
        }
        Ok(kg)
    }

    /// Writes the graph back out in the triple-file format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for t in &self.triples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}",
                self.entity_label(t.subject),
                self.relation_label(t.relation),
                self.entity_label(t.object)
            );
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Adds one fact; returns `false` when it was already present.
    pub fn insert(&mut self, subject: &str, relation: &str, object: &str) -> bool {
        let s = EntityId(self.entities.intern(normalize_label(subject)));
        let r = RelationId(self.relations.intern(normalize_label(relation)));
        let o = EntityId(self.entities.intern(normalize_label(object)));
        while self.incidence.len() < self.entities.labels.len() {
            self.incidence.push(Vec::new());
        }
        let objects = self.by_subject.entry((s, r)).or_default();
        if objects.contains(&o) {
            return false;
        }
        objects.push(o);
        let edge = EdgeId(self.triples.len() as u32);
        self.triples.push(Triple {
            subject: s,
            relation: r,
            object: o,
        });
        self.incidence[s.0 as usize].push(edge);
        if o != s {
            self.incidence[o.0 as usize].push(edge);
        }
        true
    }

    pub fn num_entities(&self) -> usize {
        self.entities.labels.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.labels.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, edge: EdgeId) -> Triple {
        self.triples[edge.0 as usize]
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.num_entities() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.num_relations() as u32).map(RelationId)
    }

    pub fn entity(&self, label: &str) -> Option<EntityId> {
        self.entities
            .index
            .get(&normalize_label(label))
            .map(|&i| EntityId(i))
    }

    pub fn relation(&self, label: &str) -> Option<RelationId> {
        self.relations
            .index
            .get(&normalize_label(label))
            .map(|&i| RelationId(i))
    }

    pub fn require_entity(&self, label: &str) -> Result<EntityId> {
        self.entity(label)
            .ok_or_else(|| Error::not_found("entity", label))
    }

    pub fn require_relation(&self, label: &str) -> Result<RelationId> {
        self.relation(label)
            .ok_or_else(|| Error::not_found("relation", label))
    }

    /// The label function over both kinds of identifier.
    pub fn label(&self, id: impl Into<KgId>) -> Result<&str> {
        match id.into() {
            KgId::Entity(e) => self
                .entities
                .labels
                .get(e.0 as usize)
                .map(String::as_str)
                .ok_or_else(|| Error::not_found("entity id", e.0)),
            KgId::Relation(r) => self
                .relations
                .labels
                .get(r.0 as usize)
                .map(String::as_str)
                .ok_or_else(|| Error::not_found("relation id", r.0)),
        }
    }

    /// Panics on an id that does not belong to this graph.
    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entities.labels[id.0 as usize]
    }

    /// Panics on an id that does not belong to this graph.
    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relations.labels[id.0 as usize]
    }

    /// Object ids of every `(e, r, o)` fact, in insertion order.
    pub fn objects(&self, e: EntityId, r: RelationId) -> &[EntityId] {
        self.by_subject
            .get(&(e, r))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Object labels of every `(e, r, o)` fact, sorted. Empty when no fact matches.
    pub fn lookup(&self, e: EntityId, r: RelationId) -> BTreeSet<&str> {
        self.objects(e, r)
            .iter()
            .map(|&o| self.entity_label(o))
            .collect()
    }

    /// Relations leaving `e` as subject, ascending.
    pub fn outgoing_relations(&self, e: EntityId) -> BTreeSet<RelationId> {
        self.incident_edges(e)
            .iter()
            .map(|&edge| self.triple(edge))
            .filter(|t| t.subject == e)
            .map(|t| t.relation)
            .collect()
    }

    pub fn incident_edges(&self, e: EntityId) -> &[EdgeId] {
        self.incidence
            .get(e.0 as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Nodes within `k` hops of `center` and every edge among them.
    pub fn k_hop_subgraph(&self, center: EntityId, k: usize) -> Result<SubGraph> {
        if center.0 as usize >= self.num_entities() {
            return Err(Error::not_found("entity id", center.0));
        }
        let mut depth: HashMap<EntityId, usize> = HashMap::new();
        depth.insert(center, 0);
        let mut queue = VecDeque::from([center]);
        while let Some(node) = queue.pop_front() {
            let d = depth[&node];
            if d == k {
                continue;
            }
            for &edge in self.incident_edges(node) {
                let t = self.triple(edge);
                let other = if t.subject == node { t.object } else { t.subject };
                if let std::collections::hash_map::Entry::Vacant(slot) = depth.entry(other) {
                    slot.insert(d + 1);
                    queue.push_back(other);
                }
            }
        }

        let mut node_ids: Vec<EntityId> = depth.keys().copied().collect();
        node_ids.sort_unstable();
        let node_set: HashSet<EntityId> = node_ids.iter().copied().collect();
        let mut edge_ids: Vec<EdgeId> = node_ids
            .iter()
            .flat_map(|&n| self.incident_edges(n).iter().copied())
            .filter(|&edge| {
                let t = self.triple(edge);
                node_set.contains(&t.subject) && node_set.contains(&t.object)
            })
            .collect();
        edge_ids.sort_unstable();
        edge_ids.dedup();

        let position: HashMap<EntityId, usize> =
            node_ids.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let n = node_ids.len();
        let mut neighbors = vec![Vec::new(); n + edge_ids.len()];
        let mut edges = Vec::with_capacity(edge_ids.len());
        for (j, &edge) in edge_ids.iter().enumerate() {
            let t = self.triple(edge);
            let row = n + j;
            let s = position[&t.subject];
            let o = position[&t.object];
            neighbors[row].push(s);
            neighbors[s].push(row);
            if o != s {
                neighbors[row].push(o);
                neighbors[o].push(row);
            }
            edges.push(t);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }

        Ok(SubGraph {
            center,
            radius: k,
            node_ids,
            edge_ids,
            edges,
            neighbors,
        })
    }
}

/// One row of the combined sub-graph index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Element {
    Node(EntityId),
    Edge(EdgeId, RelationId),
}

/// A k-hop neighbourhood.
///
/// Nodes and edges share one index: rows `0..nodes` are entities in ascending
/// id order, the remaining rows are edges in ascending id order. Each edge row
/// is adjacent to its endpoint nodes only (incidence expansion), so the
/// adjacency is bipartite and symmetric.
#[derive(Debug, Clone)]
pub struct SubGraph {
    pub center: EntityId,
    pub radius: usize,
    pub node_ids: Vec<EntityId>,
    pub edge_ids: Vec<EdgeId>,
    edges: Vec<Triple>,
    neighbors: Vec<Vec<usize>>,
}

impl SubGraph {
    /// Number of rows of the combined node+edge index.
    pub fn index_size(&self) -> usize {
        self.node_ids.len() + self.edge_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edge_ids.is_empty()
    }

    pub fn element(&self, row: usize) -> Element {
        let n = self.node_ids.len();
        if row < n {
            Element::Node(self.node_ids[row])
        } else {
            Element::Edge(self.edge_ids[row - n], self.edges[row - n].relation)
        }
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        (0..self.index_size()).map(|row| self.element(row))
    }

    pub fn edge_triples(&self) -> &[Triple] {
        &self.edges
    }

    /// Neighbours of an index row, ascending.
    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.neighbors[row]
    }

    pub fn degree(&self, row: usize) -> usize {
        self.neighbors[row].len()
    }

    pub fn contains_node(&self, e: EntityId) -> bool {
        self.node_ids.binary_search(&e).is_ok()
    }

    /// Distinct relations carried by the sub-graph's edges.
    pub fn relations(&self) -> BTreeSet<RelationId> {
        self.edges.iter().map(|t| t.relation).collect()
    }

    /// Dense 0/1 adjacency over the combined index (without self loops).
    pub fn adjacency_matrix(&self) -> Array2<f64> {
        let size = self.index_size();
        let mut a = Array2::zeros((size, size));
        for (row, list) in self.neighbors.iter().enumerate() {
            for &col in list {
                a[[row, col]] = 1.0;
            }
        }
        a
    }

    pub fn element_label<'a>(&self, kg: &'a KnowledgeGraph, row: usize) -> &'a str {
        match self.element(row) {
            Element::Node(e) => kg.entity_label(e),
            Element::Edge(_, r) => kg.relation_label(r),
        }
    }

    /// Adjacency-list text dump, one row per line: `row<TAB>kind:label<TAB>neighbours`.
    pub fn dump(&self, kg: &KnowledgeGraph) -> String {
        let mut out = String::new();
        for row in 0..self.index_size() {
            let kind = match self.element(row) {
                Element::Node(_) => "node",
                Element::Edge(..) => "edge",
            };
            let neighbours: Vec<String> = self.neighbors[row].iter().map(|n| n.to_string()).collect();
            let _ = writeln!(
                out,
                "{row}\t{kind}:{}\t{}",
                self.element_label(kg, row),
                neighbours.join(" ")
            );
        }
        out
    }
}
