//! BLEU, METEOR, KG-node entity F1 and relation-linking accuracy.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::dataset::{tokenize, Example};
use crate::error::{Error, Result};
use crate::graph::RankedRelation;
use crate::kg::{label_tokens, EntityId, KnowledgeGraph, SubGraph};
use crate::model::KgirNet;

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    counts
}

/// Corpus BLEU-4 with brevity penalty, in percent. No smoothing: any empty
/// n-gram precision makes the score 0.
pub fn bleu<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "candidates and references must align");
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, count) in ngrams(c, n) {
                matched[n - 1] += count.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if cand_len == 0 || matched.iter().any(|&m| m == 0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

/// Exact-match unigram alignment preferring continuations of the previous match.
/// Returns `(matches, chunks)`.
fn align<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let mut last: Option<usize> = None;
    for (i, h) in hyp.iter().enumerate() {
        let h = h.as_ref();
        let free = |j: usize| !used[j] && reference[j].as_ref() == h;
        let pick = match last {
            Some(l) if l + 1 < reference.len() && free(l + 1) => Some(l + 1),
            _ => (0..reference.len()).find(|&j| free(j)),
        };
        if let Some(j) = pick {
            used[j] = true;
            pairs.push((i, j));
            last = Some(j);
        }
    }
    let chunks = pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
        + usize::from(!pairs.is_empty());
    (pairs.len(), chunks)
}

/// Sentence METEOR (exact stage only, alpha 0.9, beta 3, gamma 0.5), in [0, 1].
pub fn meteor_sentence<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    let (m, chunks) = align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    // a complete single-chunk match carries no fragmentation
    let penalty = if chunks == 1 && m == hyp.len() && m == reference.len() {
        0.0
    } else {
        0.5 * (chunks as f64 / m as f64).powi(3)
    };
    f_mean * (1.0 - penalty)
}

/// Mean sentence METEOR in percent.
pub fn meteor<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "candidates and references must align");
    if candidates.is_empty() {
        return 0.0;
    }
    let total: f64 = candidates.iter().zip(references).map(|(c, r)| meteor_sentence(c, r)).sum();
    100.0 * total / candidates.len() as f64
}

/// Set F1; 1 when both sets are empty.
pub fn entity_f1<T: Ord>(predicted: &BTreeSet<T>, gold: &BTreeSet<T>) -> f64 {
    if predicted.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let hits = predicted.intersection(gold).count() as f64;
    if hits == 0.0 {
        return 0.0;
    }
    let p = hits / predicted.len() as f64;
    let r = hits / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// KG node labels mentioned in `tokens`, by longest match against the sub-graph's
/// nodes other than its centre.
pub fn extract_objects<S: AsRef<str>>(tokens: &[S], kg: &KnowledgeGraph, sub: &SubGraph) -> BTreeSet<String> {
    let mut by_tokens: HashMap<Vec<&str>, &str> = HashMap::new();
    let mut longest = 0;
    for &node in &sub.node_ids {
        if node == sub.center {
            continue;
        }
        let label = kg.entity_label(node);
        let parts = label_tokens(label);
        longest = longest.max(parts.len());
        by_tokens.insert(parts, label);
    }
    let tokens: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut step = 1;
        for len in (1..=longest.min(tokens.len() - i)).rev() {
            if let Some(label) = by_tokens.get(&tokens[i..i + len]) {
                found.insert(label.to_string());
                step = len;
                break;
            }
        }
        i += step;
    }
    found
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub dialogue_id: String,
    pub query: String,
    pub gold: String,
    pub predicted: String,
    pub intermediate: String,
    pub gold_entity: Option<String>,
    pub predicted_entity: String,
    pub gold_objects: Vec<String>,
    pub predicted_objects: Vec<String>,
    /// Per-question F1, absent when the question is not scored.
    pub entity_f1: Option<f64>,
}

/// Metrics in percent plus per-example records.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub entity_f1: f64,
    pub meteor: f64,
    pub entity_accuracy: f64,
    pub examples: usize,
    pub kg_grounded: usize,
    pub records: Vec<EvalRecord>,
}

/// Generates a reply for every example and scores it. Entity F1 covers the
/// KG-grounded examples whose gold response mentions at least one object.
pub fn evaluate(model: &KgirNet, examples: &[Example]) -> Result<EvalReport> {
    let k = model.config.k;
    let records = examples
        .par_iter()
        .map(|ex| -> Result<EvalRecord> {
            let generation = model.generate(&ex.history, &ex.query)?;
            let predicted_sub = model.kg.k_hop_subgraph(generation.entity_id, k)?;
            let predicted_objects = extract_objects(&generation.response, &model.kg, &predicted_sub);
            let (gold_objects, f1) = match ex.entity.filter(|_| ex.is_kg_grounded()) {
                Some(e) => {
                    let gold_sub = model.kg.k_hop_subgraph(e, k)?;
                    let gold = extract_objects(&ex.response, &model.kg, &gold_sub);
                    let f1 = (!gold.is_empty()).then(|| entity_f1(&predicted_objects, &gold));
                    (gold, f1)
                }
                None => (BTreeSet::new(), None),
            };
            Ok(EvalRecord {
                dialogue_id: ex.dialogue_id.clone(),
                query: ex.query.join(" "),
                gold: ex.response.join(" "),
                predicted: generation.text(),
                intermediate: generation.intermediate.join(" "),
                gold_entity: ex.entity.map(|e| model.kg.entity_label(e).to_string()),
                predicted_entity: generation.entity.clone(),
                gold_objects: gold_objects.into_iter().collect(),
                predicted_objects: predicted_objects.into_iter().collect(),
                entity_f1: f1,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(records, examples))
}

fn report(records: Vec<EvalRecord>, examples: &[Example]) -> EvalReport {
    let candidates: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.predicted)).collect();
    let references: Vec<Vec<String>> = examples.iter().map(|ex| ex.response.clone()).collect();
    let scored: Vec<f64> = records.iter().filter_map(|r| r.entity_f1).collect();
    let with_entity: Vec<&EvalRecord> = records.iter().filter(|r| r.gold_entity.is_some()).collect();
    let correct = with_entity
        .iter()
        .filter(|r| r.gold_entity.as_deref() == Some(r.predicted_entity.as_str()))
        .count();
    EvalReport {
        bleu: bleu(&candidates, &references),
        entity_f1: if scored.is_empty() {
            0.0
        } else {
            100.0 * scored.iter().sum::<f64>() / scored.len() as f64
        },
        meteor: meteor(&candidates, &references),
        entity_accuracy: if with_entity.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / with_entity.len() as f64
        },
        examples: records.len(),
        kg_grounded: scored.len(),
        records,
    }
}

/// One row of a relation-linking set.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkRow {
    pub query: String,
    pub entity: String,
    pub relation: String,
}

/// Reads `query<TAB>entity<TAB>relation` rows; blank lines are skipped.
pub fn load_link_rows(path: impl AsRef<Path>) -> Result<Vec<LinkRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        rows.push(LinkRow {
            query: fields[0].to_string(),
            entity: fields[1].to_string(),
            relation: fields[2].to_string(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct LinkReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub missing_entities: usize,
}

/// Fraction of rows whose top-ranked relation is the gold one. Rows whose entity
/// is not in the KG count as wrong.
pub fn relation_link_accuracy<F>(rows: &[LinkRow], kg: &KnowledgeGraph, linker: F) -> Result<LinkReport>
where
    F: Fn(&[String], EntityId) -> Result<Vec<RankedRelation>> + Sync,
{
    let outcomes = rows
        .par_iter()
        .map(|row| -> Result<(bool, bool)> {
            let Some(e) = kg.entity(&row.entity) else {
                log::warn!("relation linking: entity {:?} is not in the KG", row.entity);
                return Ok((false, true));
            };
            let ranked = linker(&tokenize(&row.query), e)?;
            let gold = crate::kg::normalize_label(&row.relation);
            Ok((ranked.first().is_some_and(|r| r.label == gold), false))
        })
        .collect::<Result<Vec<_>>>()?;
    let correct = outcomes.iter().filter(|o| o.0).count();
    Ok(LinkReport {
        accuracy: if rows.is_empty() { 0.0 } else { correct as f64 / rows.len() as f64 },
        correct,
        total: rows.len(),
        missing_entities: outcomes.iter().filter(|o| o.1).count(),
    })
}
