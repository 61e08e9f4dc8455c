mod common;

use kgirnet::eval::{load_link_rows, relation_link_accuracy};
use kgirnet::graph::{relation_link, similarity_link};
use kgirnet::kg::KnowledgeGraph;

fn movies() -> KnowledgeGraph {
    KnowledgeGraph::load(common::fixture("movies_kg.tsv")).unwrap()
}

#[test]
fn director_and_rating_question_ranks_both_relations_first() {
    let kg = movies();
    let emb = common::embeddings();
    let avatar = kg.entity("avatar").unwrap();
    let query = common::words("who is the director of avatar and how was it rated");
    let ranked = relation_link(&query, &kg, avatar, 2, &emb).unwrap();
    let top2: Vec<&str> = ranked.iter().take(2).map(|r| r.label.as_str()).collect();
    assert!(top2.contains(&"directed_by") && top2.contains(&"rating"), "top 2: {top2:?}");
    // every relation of the 2-hop sub-graph is a candidate
    let sub = kg.k_hop_subgraph(avatar, 2).unwrap();
    assert_eq!(ranked.len(), sub.relations().len());
}

#[test]
fn ranking_is_sorted_and_deterministic() {
    let kg = movies();
    let emb = common::embeddings();
    let titanic = kg.entity("titanic").unwrap();
    let query = common::words("what is the rating of titanic");
    let a = relation_link(&query, &kg, titanic, 2, &emb).unwrap();
    let b = relation_link(&query, &kg, titanic, 2, &emb).unwrap();
    assert_eq!(a, b);
    assert!(a.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(a[0].label, "rating");
}

#[test]
fn accuracy_over_link_file() {
    let kg = movies();
    let emb = common::embeddings();
    let rows = load_link_rows(common::fixture("movies_link.tsv")).unwrap();
    assert_eq!(rows.len(), 6);
    let lap = relation_link_accuracy(&rows, &kg, |q, e| relation_link(q, &kg, e, 2, &emb)).unwrap();
    let base = relation_link_accuracy(&rows, &kg, |q, e| similarity_link(q, &kg, e, 2, &emb)).unwrap();
    assert_eq!(lap.total, 6);
    assert_eq!(lap.missing_entities, 0);
    assert_eq!(lap.accuracy, lap.correct as f64 / 6.0);
    assert!(lap.correct >= 5, "laplacian {lap:?}");
    assert!(lap.correct >= base.correct, "laplacian {lap:?} baseline {base:?}");
}

#[test]
fn unknown_entity_rows_count_as_wrong() {
    let kg = movies();
    let emb = common::embeddings();
    let rows = vec![kgirnet::eval::LinkRow {
        query: "who directed it".into(),
        entity: "unknown_film".into(),
        relation: "directed_by".into(),
    }];
    let report = relation_link_accuracy(&rows, &kg, |q, e| relation_link(q, &kg, e, 2, &emb)).unwrap();
    assert_eq!((report.correct, report.total, report.missing_entities), (0, 1, 1));
}

