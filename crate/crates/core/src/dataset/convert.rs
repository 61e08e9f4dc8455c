//! Converters from source corpus layouts into the JSON-lines interchange format.
//!
//! * `kvret`: the in-car assistant release (a JSON array of dialogues, each with
//!   `dialogue` turns and a `scenario.kb` table). The KG is the union of all kb
//!   tables, `(first column value, column, cell)`; entity and relation
//!   annotations are extracted automatically by matching kb cells in the
//!   assistant utterances.
//! * `tsv`: a flat layout for already-annotated corpora such as the soccer
//!   dialogues: `dialogue_id<TAB>speaker<TAB>text[<TAB>entity[<TAB>rel1,rel2]]`,
//!   turns of one dialogue on consecutive lines.

use std::collections::BTreeSet;

use serde::Deserialize;

use super::{tokenize, Domain, RawDialogue, RawTurn, Speaker};
use crate::error::{Error, Result};
use crate::kg::{label_tokens, normalize_label};

#[derive(Debug, Deserialize)]
struct KvretDialogue {
    dialogue: Vec<KvretTurn>,
    scenario: KvretScenario,
}

#[derive(Debug, Deserialize)]
struct KvretTurn {
    turn: String,
    data: KvretTurnData,
}

#[derive(Debug, Deserialize)]
struct KvretTurnData {
    utterance: String,
}

#[derive(Debug, Deserialize)]
struct KvretScenario {
    kb: KvretKb,
    #[serde(default)]
    uuid: Option<String>,
}

#[derive(Debug, Deserialize)]
struct KvretKb {
    items: Option<Vec<serde_json::Map<String, serde_json::Value>>>,
    column_names: Vec<String>,
}

type RawTriple = (String, String, String);

fn kb_triples(kb: &KvretKb) -> Vec<RawTriple> {
    let Some(subject_col) = kb.column_names.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for item in kb.items.iter().flatten() {
        let Some(subject) = item.get(subject_col).and_then(|v| v.as_str()) else {
            continue;
        };
        for col in &kb.column_names[1..] {
            let Some(value) = item.get(col).and_then(|v| v.as_str()) else {
                continue;
            };
            let value = value.trim();
            if value.is_empty() || value == "-" {
                continue;
            }
            out.push((normalize_label(subject), normalize_label(col), normalize_label(value)));
        }
    }
    out
}

/// True when `label` occurs in `tokens` as a contiguous span (joined by `_`).
fn mentions(tokens: &[String], label: &str) -> bool {
    let len = label_tokens(label).len().max(1);
    tokens.windows(len).any(|w| w.join("_") == label)
}

pub struct Converted {
    /// Union knowledge graph as canonical triples, sorted.
    pub triples: Vec<RawTriple>,
    /// One JSON-lines corpus per input, in input order.
    pub corpora: Vec<String>,
}

/// Converts one or more kvret split files sharing one KG.
pub fn convert_kvret(inputs: &[&str]) -> Result<Converted> {
    let mut parsed = Vec::with_capacity(inputs.len());
    for text in inputs {
        let dialogues: Vec<KvretDialogue> = serde_json::from_str(text)?;
        parsed.push(dialogues);
    }
    let triples: BTreeSet<RawTriple> = parsed
        .iter()
        .flatten()
        .flat_map(|d| kb_triples(&d.scenario.kb))
        .collect();

    let mut corpora = Vec::new();
    for (split, dialogues) in parsed.iter().enumerate() {
        let mut out = String::new();
        for (i, d) in dialogues.iter().enumerate() {
            let id = d
                .scenario
                .uuid
                .clone()
                .unwrap_or_else(|| format!("kvret-{split}-{i}"));
            let raw = annotate_kvret(&id, d)?;
            out.push_str(&serde_json::to_string(&raw)?);
            out.push('\n');
        }
        corpora.push(out);
    }
    Ok(Converted {
        triples: triples.into_iter().collect(),
        corpora,
    })
}

fn annotate_kvret(id: &str, d: &KvretDialogue) -> Result<RawDialogue> {
    let facts = kb_triples(&d.scenario.kb);
    let subjects: Vec<&str> = {
        let mut seen = Vec::new();
        for (s, _, _) in &facts {
            if !seen.contains(&s.as_str()) {
                seen.push(s.as_str());
            }
        }
        seen
    };
    let mut turns: Vec<RawTurn> = Vec::new();
    let mut seen_tokens: Vec<String> = Vec::new();
    let mut focus: Option<&str> = None;
    for t in &d.dialogue {
        let speaker = match t.turn.as_str() {
            "driver" => Speaker::User,
            "assistant" => Speaker::System,
            other => {
                return Err(Error::Corpus {
                    dialogue: id.to_string(),
                    message: format!("unknown speaker `{other}`"),
                })
            }
        };
        let tokens = tokenize(&t.data.utterance);
        // merge consecutive turns of one speaker so speakers alternate
        if let Some(last) = turns.last_mut() {
            if last.speaker == speaker {
                last.text.push(' ');
                last.text.push_str(&t.data.utterance);
                seen_tokens.extend(tokens);
                continue;
            }
        }
        seen_tokens.extend(tokens.iter().cloned());
        if let Some(s) = subjects.iter().rev().find(|s| mentions(&seen_tokens, s)) {
            focus = Some(s);
        }
        let mut entity = None;
        let mut relations = Vec::new();
        if speaker == Speaker::System {
            let mut best: Option<(&str, Vec<String>)> = None;
            for &s in &subjects {
                let rels: BTreeSet<String> = facts
                    .iter()
                    .filter(|(subj, _, o)| subj == s && mentions(&tokens, o))
                    .map(|(_, r, _)| r.clone())
                    .collect();
                let better = match &best {
                    None => !rels.is_empty(),
                    Some((b, brels)) => {
                        rels.len() > brels.len() || (rels.len() == brels.len() && Some(s) == focus && *b != s)
                    }
                };
                if better {
                    best = Some((s, rels.into_iter().collect()));
                }
            }
            match best {
                Some((s, rels)) => {
                    entity = Some(s.to_string());
                    relations = rels;
                    focus = Some(s);
                }
                None => entity = focus.map(str::to_string),
            }
        }
        turns.push(RawTurn {
            speaker,
            text: t.data.utterance.clone(),
            entity,
            relations,
        });
    }
    Ok(RawDialogue {
        id: id.to_string(),
        domain: Domain::InCar,
        turns,
    })
}

/// Converts the flat TSV layout into JSON lines.
pub fn convert_tsv(text: &str, domain: Domain) -> Result<String> {
    let mut out = String::new();
    let mut current: Option<RawDialogue> = None;
    let flush = |d: Option<RawDialogue>, out: &mut String| -> Result<()> {
        if let Some(d) = d {
            out.push_str(&serde_json::to_string(&d)?);
            out.push('\n');
        }
        Ok(())
    };
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                path: "<tsv>".into(),
                line: lineno + 1,
                message: "expected at least dialogue_id, speaker and text".into(),
            });
        }
        let speaker = match fields[1].trim() {
            "user" | "driver" => Speaker::User,
            "system" | "assistant" => Speaker::System,
            other => {
                return Err(Error::Corpus {
                    dialogue: fields[0].to_string(),
                    message: format!("unknown speaker `{other}`"),
                })
            }
        };
        let entity = fields
            .get(3)
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        let relations = fields
            .get(4)
            .map(|s| {
                s.split(',')
                    .map(str::trim)
                    .filter(|r| !r.is_empty())
                    .map(str::to_string)
                    .collect()
            })
            .unwrap_or_default();
        let turn = RawTurn {
            speaker,
            text: fields[2].to_string(),
            entity,
            relations,
        };
        match &mut current {
            Some(d) if d.id == fields[0] => d.turns.push(turn),
            _ => {
                flush(current.take(), &mut out)?;
                current = Some(RawDialogue {
                    id: fields[0].to_string(),
                    domain,
                    turns: vec![turn],
                });
            }
        }
    }
    flush(current, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::load_corpus;
    use crate::kg::KnowledgeGraph;

    const KVRET: &str = r#"[
      {"dialogue": [
         {"turn": "driver", "data": {"end_dialogue": false, "utterance": "What time is my doctorappointment?"}},
         {"turn": "assistant", "data": {"requested": {}, "slots": {}, "utterance": "Your doctorappointment is on Friday at 11am."}}],
       "scenario": {"kb": {"items": [
            {"event": "doctorappointment", "time": "11am", "date": "friday", "party": "-", "room": "-", "agenda": "-"},
            {"event": "dinner", "time": "7pm", "date": "monday", "party": "sister", "room": "-", "agenda": "-"}],
          "column_names": ["event", "time", "date", "party", "room", "agenda"], "kb_title": "calendar"},
        "task": {"intent": "schedule"}, "uuid": "u-1"}},
      {"dialogue": [
         {"turn": "driver", "data": {"end_dialogue": false, "utterance": "Schedule a meeting with the boss."}},
         {"turn": "assistant", "data": {"requested": {}, "slots": {}, "utterance": "Done."}}],
       "scenario": {"kb": {"items": null, "column_names": ["event", "time", "date", "party", "room", "agenda"], "kb_title": "calendar"},
        "task": {"intent": "schedule"}, "uuid": "u-2"}}
    ]"#;

    #[test]
    fn kvret_builds_kg_and_annotations() {
        let converted = convert_kvret(&[KVRET]).unwrap();
        assert_eq!(converted.triples.len(), 5);
        let kg = KnowledgeGraph::from_triples(converted.triples.iter().map(|(s, r, o)| (s.as_str(), r.as_str(), o.as_str())));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        std::fs::write(&path, &converted.corpora[0]).unwrap();
        let dialogues = load_corpus(&path, Domain::InCar, &kg).unwrap();
        // the scheduling-only dialogue has no KG answer and is dropped
        assert_eq!(dialogues.len(), 1);
        let sys = &dialogues[0].turns[1];
        assert_eq!(sys.gold_entity, kg.entity("doctorappointment"));
        let rels: Vec<&str> = sys.gold_relations.iter().map(|&r| kg.relation_label(r)).collect();
        assert_eq!(rels, vec!["date", "time"]);
    }

    #[test]
    fn tsv_groups_consecutive_lines() {
        let text = "d1\tuser\twho is currently coaching bvb dortmund ?\n\
                    d1\tsystem\tlucien favre is the coach\tbvb_dortmund\tcoach\n\
                    d2\tuser\thi\n\
                    d2\tsystem\thello\n";
        let jsonl = convert_tsv(text, Domain::Soccer).unwrap();
        let lines: Vec<&str> = jsonl.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].contains("\"relations\":[\"coach\"]"));
        assert!(convert_tsv("d1\tnarrator\thi\n", Domain::Soccer).is_err());
    }
}
