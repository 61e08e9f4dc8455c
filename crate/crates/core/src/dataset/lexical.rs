use std::collections::{BTreeSet, HashMap};

use crate::kg::{label_tokens, EntityId, KnowledgeGraph, RelationId};

/// Prefix marking a relation placeholder token, e.g. `r:directed_by`.
pub const RELATION_PREFIX: &str = "r:";

pub fn relation_token(kg: &KnowledgeGraph, r: RelationId) -> String {
    format!("{RELATION_PREFIX}{}", kg.relation_label(r))
}

/// Replaces every maximal span naming an object of `entity` by the relation token
/// of the fact that produced it.
///
/// A span matches when its tokens joined by `_` equal the object's label, so both
/// `james cameron` and `james_cameron` resolve to `james_cameron`. When two
/// relations share an object label the gold relations decide, then the lowest id.
pub fn delexicalize(
    response: &[String],
    entity: EntityId,
    kg: &KnowledgeGraph,
    gold_relations: Option<&BTreeSet<RelationId>>,
) -> Vec<String> {
    let mut by_label: HashMap<&str, BTreeSet<RelationId>> = HashMap::new();
    let mut longest = 0;
    for r in kg.outgoing_relations(entity) {
        for &o in kg.objects(entity, r) {
            let label = kg.entity_label(o);
            longest = longest.max(label_tokens(label).len());
            by_label.entry(label).or_default().insert(r);
        }
    }

    let mut out = Vec::with_capacity(response.len());
    let mut i = 0;
    while i < response.len() {
        let max_span = longest.min(response.len() - i);
        let hit = (1..=max_span).rev().find_map(|len| {
            let key = response[i..i + len].join("_");
            by_label.get(key.as_str()).map(|rels| (len, rels))
        });
        match hit {
            Some((len, rels)) => {
                let chosen = pick_relation(rels, gold_relations);
                if rels.len() > 1 {
                    log::debug!(
                        "ambiguous object `{}` under `{}`; chose {}",
                        response[i..i + len].join(" "),
                        kg.entity_label(entity),
                        kg.relation_label(chosen)
                    );
                }
                out.push(relation_token(kg, chosen));
                i += len;
            }
            None => {
                out.push(response[i].clone());
                i += 1;
            }
        }
    }
    out
}

fn pick_relation(candidates: &BTreeSet<RelationId>, gold: Option<&BTreeSet<RelationId>>) -> RelationId {
    gold.and_then(|g| candidates.iter().find(|r| g.contains(r)))
        .or_else(|| candidates.iter().next())
        .copied()
        .expect("candidate set is never empty")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relexicalized {
    pub tokens: Vec<String>,
    /// Relation tokens that could not be resolved and were left verbatim.
    pub unresolved: Vec<String>,
}

/// Expands relation tokens into the object labels found by KG lookup under `entity`.
///
/// Multi-word labels expand to their word tokens; several objects are sorted and
/// separated by a `,` token.
pub fn relexicalize(response: &[String], entity: EntityId, kg: &KnowledgeGraph) -> Relexicalized {
    let mut tokens = Vec::with_capacity(response.len());
    let mut unresolved = Vec::new();
    for token in response {
        let Some(label) = token.strip_prefix(RELATION_PREFIX) else {
            tokens.push(token.clone());
            continue;
        };
        let objects = kg
            .relation(label)
            .map(|r| kg.lookup(entity, r))
            .unwrap_or_default();
        if objects.is_empty() {
            log::debug!("no `{label}` fact for `{}`", kg.entity_label(entity));
            tokens.push(token.clone());
            unresolved.push(token.clone());
            continue;
        }
        for (k, object) in objects.into_iter().enumerate() {
            if k > 0 {
                tokens.push(",".to_string());
            }
            tokens.extend(label_tokens(object).into_iter().map(String::from));
        }
    }
    Relexicalized { tokens, unresolved }
}
