//! Dialogue corpora, annotations and training examples.
//!
//! Corpora are stored as JSON lines, one dialogue per line:
//!
//! ```json
//! {"id": "d1", "domain": "in-car", "turns": [
//!   {"speaker": "user", "text": "what time is my doctorappointment ?"},
//!   {"speaker": "system", "text": "your doctorappointment is on friday at 11am",
//!    "entity": "doctorappointment", "relations": ["date", "time"]}]}
//! ```

pub mod convert;
mod lexical;
mod vocab;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

pub use lexical::{delexicalize, relexicalize, Relexicalized, RELATION_PREFIX};
pub use vocab::{Vocabulary, EOS, EOU, PAD, SOS, SPECIALS, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "in-car")]
    InCar,
    #[serde(rename = "soccer")]
    Soccer,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::InCar => "in-car",
            Domain::Soccer => "soccer",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-car" | "incar" => Ok(Domain::InCar),
            "soccer" => Ok(Domain::Soccer),
            other => Err(Error::Config(format!("unknown domain `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    pub gold_entity: Option<EntityId>,
    pub gold_relations: BTreeSet<RelationId>,
}

impl Turn {
    pub fn new(speaker: Speaker, text: &str) -> Self {
        Turn {
            speaker,
            tokens: tokenize(text),
            gold_entity: None,
            gold_relations: BTreeSet::new(),
        }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub domain: Domain,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// True when some system turn is annotated with KG relations.
    pub fn is_kg_grounded(&self) -> bool {
        self.turns
            .iter()
            .any(|t| t.speaker == Speaker::System && !t.gold_relations.is_empty())
    }

    /// Copy with every annotated system turn rewritten into relation tokens.
    pub fn delexicalized(&self, kg: &KnowledgeGraph) -> Dialogue {
        let turns = self
            .turns
            .iter()
            .map(|t| match (t.speaker, t.gold_entity) {
                (Speaker::System, Some(e)) => Turn {
                    tokens: delexicalize(&t.tokens, e, kg, Some(&t.gold_relations)),
                    ..t.clone()
                },
                _ => t.clone(),
            })
            .collect();
        Dialogue {
            turns,
            ..self.clone()
        }
    }
}

/// Lowercases and splits on whitespace; leading/trailing `? ! . , ; :` become their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    const PUNCT: &[char] = &['?', '!', '.', ',', ';', ':'];
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let word = raw.to_lowercase();
        let core = word.trim_matches(PUNCT);
        if core.is_empty() {
            out.extend(word.chars().map(String::from));
            continue;
        }
        let start = word.len() - word.trim_start_matches(PUNCT).len();
        let end = start + core.len();
        out.extend(word[..start].chars().map(String::from));
        // inner punctuation stays: "7.8", "5:00pm"
        out.push(core.to_string());
        out.extend(word[end..].chars().map(String::from));
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTurn {
    speaker: Speaker,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entity: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    relations: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDialogue {
    id: String,
    domain: Domain,
    turns: Vec<RawTurn>,
}

fn resolve(raw: RawDialogue, kg: &KnowledgeGraph) -> Result<Dialogue> {
    let fail = |message: String| Error::Corpus {
        dialogue: raw.id.clone(),
        message,
    };
    if raw.turns.is_empty() {
        return Err(fail("dialogue has no turns".into()));
    }
    let mut turns = Vec::with_capacity(raw.turns.len());
    for (i, t) in raw.turns.iter().enumerate() {
        if i > 0 && raw.turns[i - 1].speaker == t.speaker {
            return Err(fail(format!("turn {i}: speakers do not alternate")));
        }
        let gold_entity = match &t.entity {
            Some(label) => Some(
                kg.entity(label)
                    .ok_or_else(|| fail(format!("turn {i}: unknown entity `{label}`")))?,
            ),
            None => None,
        };
        let mut gold_relations = BTreeSet::new();
        for label in &t.relations {
            let r = kg
                .relation(label)
                .ok_or_else(|| fail(format!("turn {i}: unknown relation `{label}`")))?;
            gold_relations.insert(r);
        }
        turns.push(Turn {
            speaker: t.speaker,
            tokens: tokenize(&t.text),
            gold_entity,
            gold_relations,
        });
    }
    Ok(Dialogue {
        id: raw.id,
        domain: raw.domain,
        turns,
    })
}

/// Parses a JSON-lines corpus against `kg`.
///
/// In-car dialogues without a single relation-annotated system turn are
/// dropped (scheduling conversations have no KG answer).
pub fn load_corpus(
    path: impl AsRef<Path>,
    domain: Domain,
    kg: &KnowledgeGraph,
) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dialogues = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDialogue = serde_json::from_str(line).map_err(|e| {
            // name the dialogue when the id is at least readable
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string));
            match id {
                Some(dialogue) => Error::Corpus {
                    dialogue,
                    message: e.to_string(),
                },
                None => Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: e.to_string(),
                },
            }
        })?;
        if raw.domain != domain {
            return Err(Error::Corpus {
                dialogue: raw.id,
                message: format!("domain {} does not match requested {domain}", raw.domain),
            });
        }
        let dialogue = resolve(raw, kg)?;
        if domain == Domain::InCar && !dialogue.is_kg_grounded() {
            continue;
        }
        dialogues.push(dialogue);
    }
    Ok(dialogues)
}

/// Writes dialogues in the corpus interchange format.
pub fn save_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue], kg: &KnowledgeGraph) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for d in dialogues {
        let raw = RawDialogue {
            id: d.id.clone(),
            domain: d.domain,
            turns: d
                .turns
                .iter()
                .map(|t| RawTurn {
                    speaker: t.speaker,
                    text: t.text(),
                    entity: t.gold_entity.map(|e| kg.entity_label(e).to_string()),
                    relations: t
                        .gold_relations
                        .iter()
                        .map(|&r| kg.relation_label(r).to_string())
                        .collect(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&raw)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Corpus statistics in the shape of the dataset table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub utterances: usize,
    /// Percentage of system turns whose answer needs at least one KG fact.
    pub kg_grounded_pct: f64,
}

pub fn corpus_stats(dialogues: &[Dialogue]) -> CorpusStats {
    let utterances = dialogues.iter().map(|d| d.turns.len()).sum();
    let (grounded, questions) = dialogues
        .iter()
        .flat_map(|d| d.turns.iter())
        .filter(|t| t.speaker == Speaker::System)
        .fold((0usize, 0usize), |(g, q), t| {
            (g + usize::from(!t.gold_relations.is_empty()), q + 1)
        });
    CorpusStats {
        dialogues: dialogues.len(),
        utterances,
        kg_grounded_pct: if questions == 0 {
            0.0
        } else {
            100.0 * grounded as f64 / questions as f64
        },
    }
}

/// Previous utterances joined by `<EOU>`, query last, left-truncated to `max_len` tokens.
pub fn build_context(history: &[Vec<String>], query: &[String], max_len: usize) -> Vec<String> {
    let mut tokens = Vec::new();
    for utterance in history {
        tokens.extend(utterance.iter().cloned());
        tokens.push(EOU.to_string());
    }
    tokens.extend(query.iter().cloned());
    if tokens.len() > max_len {
        tokens.drain(..tokens.len() - max_len);
    }
    tokens
}

/// One system response together with everything that precedes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub dialogue_id: String,
    pub history: Vec<Vec<String>>,
    pub query: Vec<String>,
    pub entity: Option<EntityId>,
    pub relations: BTreeSet<RelationId>,
    /// Surface response.
    pub response: Vec<String>,
    /// Response with object mentions replaced by relation tokens.
    pub intermediate: Vec<String>,
}

impl Example {
    pub fn is_kg_grounded(&self) -> bool {
        self.entity.is_some() && !self.relations.is_empty()
    }
}

/// One example per system turn that follows a user turn.
pub fn examples(dialogues: &[Dialogue], kg: &KnowledgeGraph) -> Vec<Example> {
    let mut out = Vec::new();
    for d in dialogues {
        for (t, turn) in d.turns.iter().enumerate() {
            if turn.speaker != Speaker::System || t == 0 {
                continue;
            }
            let user = &d.turns[t - 1];
            let entity = turn.gold_entity.or(user.gold_entity);
            let intermediate = match entity {
                Some(e) => delexicalize(&turn.tokens, e, kg, Some(&turn.gold_relations)),
                None => turn.tokens.clone(),
            };
            out.push(Example {
                dialogue_id: d.id.clone(),
                history: d.turns[..t - 1].iter().map(|x| x.tokens.clone()).collect(),
                query: user.tokens.clone(),
                entity,
                relations: turn.gold_relations.clone(),
                response: turn.tokens.clone(),
                intermediate,
            });
        }
    }
    out
}
