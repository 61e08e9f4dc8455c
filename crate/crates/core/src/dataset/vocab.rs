use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::lexical::{relation_token, RELATION_PREFIX};
use super::Dialogue;
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, RelationId};

pub const PAD: &str = "<PAD>";
pub const SOS: &str = "<SOS>";
pub const EOS: &str = "<EOS>";
pub const EOU: &str = "<EOU>";
pub const UNK: &str = "<UNK>";
pub const SPECIALS: [&str; 5] = [PAD, SOS, EOS, EOU, UNK];

/// Output vocabulary with two segments: word tokens first (specials included),
/// then one placeholder token per KG relation in relation-id order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    num_words: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    words: Vec<String>,
    relations: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;

    fn try_from(file: VocabFile) -> std::result::Result<Self, String> {
        Vocabulary::from_segments(file.words, file.relations).map_err(|e| e.to_string())
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        let relations = v.tokens[v.num_words..].to_vec();
        let mut words = v.tokens;
        words.truncate(v.num_words);
        VocabFile { words, relations }
    }
}

impl Vocabulary {
    pub fn from_segments(words: Vec<String>, relations: Vec<String>) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Config(format!("word segment must start with {SPECIALS:?}")));
            }
        }
        if let Some(bad) = relations.iter().find(|t| !t.starts_with(RELATION_PREFIX)) {
            return Err(Error::Config(format!("relation token `{bad}` lacks the `{RELATION_PREFIX}` prefix")));
        }
        let num_words = words.len();
        let tokens: Vec<String> = words.into_iter().chain(relations).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary {
            tokens,
            num_words,
            index,
        })
    }

    /// Word segment from tokens with frequency >= `min_freq` (most frequent first,
    /// ties alphabetical); relation segment covers every relation of `kg`, seen or not.
    pub fn build(dialogues: &[Dialogue], kg: &KnowledgeGraph, min_freq: usize) -> Self {
        Self::from_token_stream(
            dialogues.iter().flat_map(|d| d.turns.iter()).flat_map(|t| t.tokens.iter()),
            kg,
            min_freq,
        )
    }

    pub fn from_token_stream<'a, I>(tokens: I, kg: &KnowledgeGraph, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            if t.starts_with(RELATION_PREFIX) || SPECIALS.contains(&t.as_str()) {
                continue;
            }
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let mut frequent: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_freq.max(1)).collect();
        frequent.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(frequent.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        let relations = kg.relation_ids().map(|r| relation_token(kg, r)).collect();
        Self::from_segments(words, relations).expect("segments are disjoint by construction")
    }

    /// Total size, words plus relations.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.num_words
    }

    pub fn num_relations(&self) -> usize {
        self.tokens.len() - self.num_words
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn words(&self) -> &[String] {
        &self.tokens[..self.num_words]
    }

    pub fn relation_tokens(&self) -> &[String] {
        &self.tokens[self.num_words..]
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn sos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    pub fn eou(&self) -> usize {
        3
    }

    pub fn unk(&self) -> usize {
        4
    }

    /// Relation behind a vocabulary position, if it is in the relation segment.
    pub fn relation_at(&self, id: usize) -> Option<RelationId> {
        (id >= self.num_words && id < self.tokens.len()).then(|| RelationId((id - self.num_words) as u32))
    }

    pub fn relation_position(&self, r: RelationId) -> usize {
        self.num_words + r.0 as usize
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    /// Checks that the relation segment is exactly the relations of `kg` in id order.
    pub fn check_against(&self, kg: &KnowledgeGraph) -> Result<()> {
        let expected: Vec<String> = kg.relation_ids().map(|r| relation_token(kg, r)).collect();
        if expected != self.relation_tokens() {
            return Err(Error::Config(
                "vocabulary relation segment does not match the knowledge graph".into(),
            ));
        }
        Ok(())
    }
}
