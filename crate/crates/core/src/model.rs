//! The end-to-end model: entity detection, intermediate-response generation,
//! sub-graph gating and relexicalisation.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_context, relexicalize, Example, Vocabulary, RELATION_PREFIX};
use crate::decoder::{beam_search, Decoder, GatedDecoder};
use crate::embeddings::StaticEmbeddings;
use crate::encoder::{
    detect_entity, CnnHeadConfig, ContextEncoder, EncodedQuery, EncoderKind, EntityHead, EntityHeadKind, PieceVocab,
    QueryEncoder, TransformerConfig,
};
use crate::error::{Error, Result};
use crate::graph::{feature_similarity, graph_encode, project_gate, VocabGate};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::nn::{dropout, ParamStore, Tape, Var, IGNORE};

/// Word pieces for words seen fewer times than this are split into chunks.
const PIECE_MIN_WHOLE: usize = 2;
const PIECE_CHUNK: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_kind: EncoderKind,
    /// Context tokens fed to the contextual encoder (left-truncated).
    pub encoder_max_len: usize,
    pub transformer: TransformerConfig,
    pub entity_head: EntityHeadKind,
    pub cnn: CnnHeadConfig,
    pub h_dim: usize,
    /// Width of the decoder's token embeddings.
    pub emb_dim: usize,
    pub k: usize,
    pub subgraph_gate: bool,
    /// Train on relation-token responses rather than surface text.
    pub intermediate: bool,
    pub dropout: f64,
    pub beam_width: usize,
    pub max_len: usize,
    /// Entity probability below which a prediction is marked low-confidence.
    pub confidence_threshold: f64,
    pub min_freq: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_kind: EncoderKind::Transformer,
            encoder_max_len: 64,
            transformer: TransformerConfig::default(),
            entity_head: EntityHeadKind::Cnn,
            cnn: CnnHeadConfig::default(),
            h_dim: 256,
            emb_dim: 128,
            k: 2,
            subgraph_gate: true,
            intermediate: true,
            dropout: 0.1,
            beam_width: 5,
            max_len: 30,
            confidence_threshold: 0.5,
            min_freq: 1,
        }
    }
}

/// One generated reply with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Generation {
    pub response: Vec<String>,
    pub intermediate: Vec<String>,
    pub entity: String,
    #[serde(skip)]
    pub entity_id: EntityId,
    pub confidence: f64,
    pub low_confidence: bool,
    /// Relation tokens emitted, in order of first use.
    pub relations: Vec<String>,
    /// Objects substituted for those tokens.
    pub objects: Vec<String>,
    pub unresolved: Vec<String>,
    /// Relations of the entity's sub-graph (the ones the gate lets through).
    pub subgraph_relations: Vec<String>,
    pub finished: bool,
    pub log_prob: f64,
}

impl Generation {
    pub fn text(&self) -> String {
        self.response.join(" ")
    }
}

/// An example turned into ids.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub context: Vec<String>,
    pub entity_class: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Scalar loss terms of one example.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub decoder: Var,
    pub entity: Var,
}

pub struct KgirNet {
    pub config: ModelConfig,
    pub kg: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub embeddings: StaticEmbeddings,
    pub params: ParamStore,
    entities: Vec<EntityId>,
    entity_index: HashMap<EntityId, usize>,
    context: ContextEncoder,
    head: EntityHead,
    query_encoder: QueryEncoder,
    decoder: Decoder,
}

impl KgirNet {
    /// Builds an untrained model. `pieces` is required for the transformer encoder.
    pub fn new(
        config: ModelConfig,
        kg: KnowledgeGraph,
        vocab: Vocabulary,
        entities: Vec<EntityId>,
        pieces: Option<PieceVocab>,
        embeddings: StaticEmbeddings,
        seed: u64,
    ) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Config("the model needs at least one entity class".into()));
        }
        if config.h_dim == 0 || config.emb_dim == 0 || config.beam_width == 0 || config.max_len == 0 {
            return Err(Error::Config("h_dim, emb_dim, beam_width and max_len must be positive".into()));
        }
        vocab.check_against(&kg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let context = match config.encoder_kind {
            EncoderKind::Static => {
                if embeddings.dim() == 0 {
                    return Err(Error::Config("static encoder needs a non-empty embedding table".into()));
                }
                ContextEncoder::new_static(
                    &mut params,
                    vocab.words(),
                    embeddings.dim(),
                    Some(&embeddings),
                    config.encoder_max_len,
                    &mut rng,
                )
            }
            EncoderKind::Transformer => {
                let pieces = pieces.ok_or_else(|| Error::Config("transformer encoder needs a piece vocabulary".into()))?;
                if config.transformer.heads == 0 || config.transformer.d_model % config.transformer.heads != 0 {
                    return Err(Error::Config("transformer heads must divide d_model".into()));
                }
                ContextEncoder::new_transformer(
                    &mut params,
                    pieces,
                    config.transformer.clone(),
                    config.encoder_max_len.max(3),
                    &mut rng,
                )
            }
        };
        let d_ctx = context.dim();
        let head = match config.entity_head {
            EntityHeadKind::Cnn => EntityHead::new_cnn(&mut params, d_ctx, entities.len(), &config.cnn, &mut rng),
            EntityHeadKind::Linear => EntityHead::new_linear(&mut params, d_ctx, entities.len(), &mut rng),
        };
        let query_encoder = QueryEncoder::new(&mut params, d_ctx, config.h_dim, &mut rng);
        let decoder = Decoder::new(&mut params, vocab.len(), config.emb_dim, config.h_dim, config.h_dim, &mut rng);
        let entity_index = entities.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        Ok(KgirNet {
            config,
            kg,
            vocab,
            embeddings,
            params,
            entities,
            entity_index,
            context,
            head,
            query_encoder,
            decoder,
        })
    }

    /// Builds vocabulary, entity classes and word pieces from training examples.
    pub fn for_examples(
        config: ModelConfig,
        kg: KnowledgeGraph,
        embeddings: StaticEmbeddings,
        examples: &[Example],
        seed: u64,
    ) -> Result<Self> {
        let tokens: Vec<&String> = examples
            .iter()
            .flat_map(|ex| {
                ex.history
                    .iter()
                    .flatten()
                    .chain(&ex.query)
                    .chain(&ex.response)
                    .chain(&ex.intermediate)
            })
            .collect();
        let vocab = Vocabulary::from_token_stream(tokens.iter().copied(), &kg, config.min_freq);
        let pieces = (config.encoder_kind == EncoderKind::Transformer).then(|| {
            PieceVocab::build(
                tokens.iter().copied().filter(|t| !t.starts_with(RELATION_PREFIX)),
                PIECE_MIN_WHOLE,
                PIECE_CHUNK,
            )
        });
        let entities = entity_classes(&kg, examples);
        Self::new(config, kg, vocab, entities, pieces, embeddings, seed)
    }

    pub fn entities(&self) -> &[EntityId] {
        &self.entities
    }

    pub fn entity_class(&self, e: EntityId) -> Option<usize> {
        self.entity_index.get(&e).copied()
    }

    pub fn pieces(&self) -> Option<&PieceVocab> {
        self.context.pieces()
    }

    pub fn prepare(&self, ex: &Example) -> Prepared {
        let context = build_context(&ex.history, &ex.query, self.config.encoder_max_len);
        let target = if self.config.intermediate { &ex.intermediate } else { &ex.response };
        let ids: Vec<usize> = target
            .iter()
            .take(self.config.max_len.saturating_sub(1))
            .map(|t| self.vocab.id_or_unk(t))
            .collect();
        let mut inputs = vec![self.vocab.sos()];
        inputs.extend(&ids);
        let mut targets = ids;
        targets.push(self.vocab.eos());
        Prepared {
            context: if context.is_empty() { vec![crate::dataset::EOU.to_string()] } else { context },
            entity_class: ex.entity.and_then(|e| self.entity_class(e)).unwrap_or(IGNORE),
            inputs,
            targets,
        }
    }

    /// Decoder cross-entropy summed over target steps plus the entity cross-entropy.
    /// `rng` switches dropout on.
    pub fn loss_terms(&self, tape: &mut Tape, ex: &Prepared, mut rng: Option<&mut ChaCha8Rng>) -> LossTerms {
        let enc = self.context.encode(tape, &ex.context);
        let ent_logits = self.head.logits(tape, &enc, rng.as_deref_mut());
        let entity = tape.cross_entropy(ent_logits, &[ex.entity_class]);
        let states = dropout(tape, enc.token_states, self.config.dropout, rng.as_deref_mut());
        let out = self.query_encoder.encode(tape, states);
        let logits = self
            .decoder
            .teacher_forced(tape, out.states, out.final_state, &ex.inputs, self.config.dropout, rng);
        let decoder = tape.cross_entropy(logits, &ex.targets);
        let total = tape.sum_scalars(&[decoder, entity]);
        LossTerms { total, decoder, entity }
    }

    /// Loss of one example without dropout.
    pub fn loss(&self, ex: &Example) -> f64 {
        let prepared = self.prepare(ex);
        let mut tape = Tape::new(&self.params);
        let terms = self.loss_terms(&mut tape, &prepared, None);
        tape.scalar(terms.total)
    }

    fn encode(&self, tape: &mut Tape, context: &[String]) -> EncodedQuery {
        self.context.encode(tape, context)
    }

    /// Probability of every entity class for a context.
    pub fn entity_distribution(&self, context: &[String]) -> Vec<f64> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, context);
        detect_entity::<ChaCha8Rng>(&mut tape, &self.head, &enc)
    }

    /// Gate for a query over the sub-graph of `entity`; `None` when gating is off.
    pub fn gate(&self, query: &[String], entity: EntityId) -> Result<(Option<VocabGate>, BTreeSet<RelationId>)> {
        let sub = self.kg.k_hop_subgraph(entity, self.config.k)?;
        let relations = sub.relations();
        if !self.config.subgraph_gate {
            return Ok((None, relations));
        }
        let f = feature_similarity(query, &sub, &self.kg, &self.embeddings);
        let g = graph_encode(&sub, &f)?;
        Ok((Some(project_gate(&g, &sub, &self.vocab)), relations))
    }

    /// Full pipeline: entity, sub-graph gate, beam search, relexicalisation.
    pub fn generate(&self, history: &[Vec<String>], query: &[String]) -> Result<Generation> {
        self.generate_with(history, query, self.config.beam_width)
    }

    pub fn generate_with(&self, history: &[Vec<String>], query: &[String], beam_width: usize) -> Result<Generation> {
        let mut context = build_context(history, query, self.config.encoder_max_len);
        if context.is_empty() {
            context.push(crate::dataset::EOU.to_string());
        }
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, &context);
        let probs = detect_entity::<ChaCha8Rng>(&mut tape, &self.head, &enc);
        let best = (0..probs.len())
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
            .expect("at least one entity class");
        let entity = self.entities[best];
        let confidence = probs[best];
        let out = self.query_encoder.encode(&mut tape, enc.token_states);
        let memory = tape.value(out.states).clone();
        let init = (
            tape.value(out.final_state.h).clone(),
            tape.value(out.final_state.c).clone(),
        );
        drop(tape);

        let (gate, sub_relations) = self.gate(query, entity)?;
        let model = GatedDecoder {
            decoder: &self.decoder,
            params: &self.params,
            memory,
            init,
            gate: gate.as_ref(),
            num_words: self.vocab.num_words(),
        };
        let hyp = beam_search(&model, self.vocab.sos(), self.vocab.eos(), beam_width.max(1), self.config.max_len);
        let mut ids = hyp.tokens.clone();
        if ids.last() == Some(&self.vocab.eos()) {
            ids.pop();
        }
        let intermediate = self.vocab.decode(&ids);
        let relex = relexicalize(&intermediate, entity, &self.kg);

        let mut relations: Vec<String> = Vec::new();
        let mut objects: BTreeSet<String> = BTreeSet::new();
        for tok in &intermediate {
            let Some(label) = tok.strip_prefix(RELATION_PREFIX) else { continue };
            if !relations.iter().any(|r| r == label) {
                relations.push(label.to_string());
            }
            if let Some(r) = self.kg.relation(label) {
                objects.extend(self.kg.lookup(entity, r).into_iter().map(str::to_string));
            }
        }
        Ok(Generation {
            response: relex.tokens,
            intermediate,
            entity: self.kg.entity_label(entity).to_string(),
            entity_id: entity,
            confidence,
            low_confidence: confidence < self.config.confidence_threshold,
            relations,
            objects: objects.into_iter().collect(),
            unresolved: relex.unresolved,
            subgraph_relations: sub_relations
                .into_iter()
                .map(|r| self.kg.relation_label(r).to_string())
                .collect(),
            finished: hyp.finished,
            log_prob: hyp.log_prob,
        })
    }

    /// Writes a self-contained checkpoint directory.
    pub fn save(&self, dir: impl AsRef<Path>, seed: u64) -> Result<()> {
        self.save_scored(dir, seed, None)
    }

    /// Like [`KgirNet::save`], recording the validation entity F1 the checkpoint was selected by.
    pub fn save_scored(&self, dir: impl AsRef<Path>, seed: u64, valid_entity_f1: Option<f64>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stored = StoredConfig {
            model: self.config.clone(),
            seed,
            valid_entity_f1,
            entities: self.entities.iter().map(|&e| self.kg.entity_label(e).to_string()).collect(),
        };
        write_json(&dir.join(CONFIG_FILE), &stored)?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab)?;
        if let Some(p) = self.pieces() {
            write_json(&dir.join(PIECES_FILE), p)?;
        }
        self.kg.save(dir.join(KG_FILE))?;
        self.embeddings.save(dir.join(EMBEDDINGS_FILE))?;
        let path = dir.join(WEIGHTS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.params
            .write_to(BufWriter::new(file))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let stored: StoredConfig = read_json(&dir.join(CONFIG_FILE))?;
        let vocab: Vocabulary = read_json(&dir.join(VOCAB_FILE))?;
        let pieces_path = dir.join(PIECES_FILE);
        let pieces: Option<PieceVocab> = if pieces_path.exists() { Some(read_json(&pieces_path)?) } else { None };
        let kg = KnowledgeGraph::load(dir.join(KG_FILE))?;
        let embeddings = StaticEmbeddings::load(dir.join(EMBEDDINGS_FILE))?;
        let entities = stored
            .entities
            .iter()
            .map(|l| kg.require_entity(l))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self::new(stored.model, kg, vocab, entities, pieces, embeddings, stored.seed)?;
        let path = dir.join(WEIGHTS_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let loaded = ParamStore::read_from(BufReader::new(file)).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        model.params.assign_from(&loaded).map_err(|e| Error::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(model)
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PIECES_FILE: &str = "pieces.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const KG_FILE: &str = "kg.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

#[derive(Debug, Serialize, Deserialize)]
struct StoredConfig {
    model: ModelConfig,
    seed: u64,
    #[serde(default)]
    valid_entity_f1: Option<f64>,
    entities: Vec<String>,
}

/// Validation entity F1 stored with a checkpoint, if it was selected on one.
pub fn checkpoint_score(dir: impl AsRef<Path>) -> Result<Option<f64>> {
    let stored: StoredConfig = read_json(&dir.as_ref().join(CONFIG_FILE))?;
    Ok(stored.valid_entity_f1)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Entity classes: every subject in the KG plus any gold entity of the examples, by id.
pub fn entity_classes(kg: &KnowledgeGraph, examples: &[Example]) -> Vec<EntityId> {
    let mut set: BTreeSet<EntityId> = kg.triples().iter().map(|t| t.subject).collect();
    set.extend(examples.iter().filter_map(|ex| ex.entity));
    set.into_iter().collect()
}
