#![allow(dead_code)]

use std::path::PathBuf;

use kgirnet::dataset::{examples, load_corpus, Dialogue, Domain, Example};
use kgirnet::embeddings::StaticEmbeddings;
use kgirnet::kg::KnowledgeGraph;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn embeddings() -> StaticEmbeddings {
    StaticEmbeddings::load(fixture("embeddings.txt")).unwrap()
}

pub struct Corpus {
    pub kg: KnowledgeGraph,
    pub dialogues: Vec<Dialogue>,
    pub examples: Vec<Example>,
}

pub fn corpus(kg: &str, dialogues: &str, domain: Domain) -> Corpus {
    let kg = KnowledgeGraph::load(fixture(kg)).unwrap();
    let dialogues = load_corpus(fixture(dialogues), domain, &kg).unwrap();
    let examples = examples(&dialogues, &kg);
    Corpus { kg, dialogues, examples }
}

pub fn incar() -> Corpus {
    corpus("incar_kg.tsv", "incar_train.jsonl", Domain::InCar)
}

pub fn soccer() -> Corpus {
    corpus("soccer_kg.tsv", "soccer_train.jsonl", Domain::Soccer)
}

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}
