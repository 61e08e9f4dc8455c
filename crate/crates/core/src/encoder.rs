//! Query encoding: contextual token states, entity detection and the recurrent
//! input encoder.
//!
//! Two contextual encoders are available. `Transformer` is a bidirectional
//! self-attention encoder over word pieces with `[CLS]`/`[SEP]` framing; piece
//! states are mean-pooled back to one state per input token and `[CLS]` gives
//! the aggregate. `Static` looks tokens up in a (fine-tuned) word-embedding
//! table and averages them for the aggregate.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EOU, UNK};
use crate::embeddings::StaticEmbeddings;
use crate::nn::{dropout, Group, LayerNorm, Linear, Lstm, LstmState, ParamId, ParamStore, Tape, Var};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PIECE_UNK: &str = "[UNK]";
const CONTINUATION: &str = "##";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Transformer,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityHeadKind {
    Cnn,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_dim: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnHeadConfig {
    pub filters: usize,
    pub kernel_sizes: Vec<usize>,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for CnnHeadConfig {
    fn default() -> Self {
        CnnHeadConfig {
            filters: 300,
            kernel_sizes: vec![3, 4, 5],
            hidden: 500,
            dropout: 0.1,
        }
    }
}

/// WordPiece-style inventory: whole words plus `##`-prefixed continuation pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct PieceVocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for PieceVocab {
    fn from(pieces: Vec<String>) -> Self {
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        PieceVocab { pieces, index }
    }
}

impl From<PieceVocab> for Vec<String> {
    fn from(v: PieceVocab) -> Self {
        v.pieces
    }
}

impl PieceVocab {
    /// Words seen at least `min_whole` times stay whole; rarer words are cut into
    /// chunks of at most `chunk` characters.
    pub fn build<'a, I>(words: I, min_whole: usize, chunk: usize) -> Self
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in words {
            *counts.entry(w.as_str()).or_default() += 1;
        }
        let mut sorted: Vec<(&str, usize)> = counts.into_iter().collect();
        sorted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut pieces: Vec<String> = [CLS, SEP, PIECE_UNK, EOU].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = pieces.iter().cloned().collect();
        let mut push = |p: String, pieces: &mut Vec<String>| {
            if seen.insert(p.clone()) {
                pieces.push(p);
            }
        };
        for (w, c) in sorted {
            if c >= min_whole {
                push(w.to_string(), &mut pieces);
            } else {
                let chars: Vec<char> = w.chars().collect();
                for (k, part) in chars.chunks(chunk.max(1)).enumerate() {
                    let s: String = part.iter().collect();
                    push(if k == 0 { s } else { format!("{CONTINUATION}{s}") }, &mut pieces);
                }
            }
        }
        PieceVocab::from(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    /// Greedy longest-match split of one word; `[UNK]` when no split exists.
    pub fn split(&self, word: &str) -> Vec<usize> {
        if let Some(id) = self.id(word) {
            return vec![id];
        }
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let body: String = chars[start..end].iter().collect();
                let candidate = if start == 0 { body } else { format!("{CONTINUATION}{body}") };
                if let Some(id) = self.id(&candidate) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    start = end;
                }
                None => return vec![self.id(PIECE_UNK).expect("unk piece")],
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct TransformerLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm_attn: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    norm_ff: LayerNorm,
}

#[derive(Debug, Clone)]
pub enum ContextEncoder {
    Static {
        table: ParamId,
        index: HashMap<String, usize>,
        unk: usize,
        dim: usize,
        max_len: usize,
    },
    Transformer {
        pieces: PieceVocab,
        token_embedding: ParamId,
        position_embedding: ParamId,
        layers: Vec<TransformerLayerHandle>,
        config: TransformerConfig,
        max_len: usize,
    },
}

/// Opaque handle to one transformer block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayerHandle(TransformerLayer);

/// Contextual states on the tape: one row per encoded input token plus the aggregate row.
#[derive(Debug, Clone, Copy)]
pub struct EncodedQuery {
    pub token_states: Var,
    pub aggregate: Var,
    /// Input tokens kept after left truncation.
    pub tokens_used: usize,
}

impl ContextEncoder {
    /// Embedding-table encoder over `words`; rows start from `pretrained` where available.
    pub fn new_static<R: Rng>(
        store: &mut ParamStore,
        words: &[String],
        dim: usize,
        pretrained: Option<&StaticEmbeddings>,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        let mut table = Array2::from_shape_fn((words.len(), dim), |_| rng.random_range(-0.1..0.1));
        if let Some(pre) = pretrained {
            for (i, w) in words.iter().enumerate() {
                if let Some(v) = pre.get(w) {
                    if v.len() == dim {
                        table.row_mut(i).assign(&v);
                    }
                }
            }
        }
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let unk = index.get(UNK).copied().unwrap_or(0);
        ContextEncoder::Static {
            table: store.add("context.embedding", table, Group::Encoder),
            index,
            unk,
            dim,
            max_len,
        }
    }

    pub fn new_transformer<R: Rng>(
        store: &mut ParamStore,
        pieces: PieceVocab,
        config: TransformerConfig,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        assert!(config.d_model % config.heads == 0, "heads must divide d_model");
        let d = config.d_model;
        let g = Group::Encoder;
        let token_embedding = store.add_uniform("context.piece_embedding", (pieces.len(), d), 0.1, g, rng);
        let position_embedding = store.add_uniform("context.position_embedding", (max_len, d), 0.1, g, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let name = |part: &str| format!("context.layer{l}.{part}");
                TransformerLayerHandle(TransformerLayer {
                    query: Linear::new(store, &name("query"), d, d, g, rng),
                    key: Linear::new(store, &name("key"), d, d, g, rng),
                    value: Linear::new(store, &name("value"), d, d, g, rng),
                    output: Linear::new(store, &name("output"), d, d, g, rng),
                    norm_attn: LayerNorm::new(store, &name("norm_attn"), d, g),
                    ff_in: Linear::new(store, &name("ff_in"), d, config.ff_dim, g, rng),
                    ff_out: Linear::new(store, &name("ff_out"), config.ff_dim, d, g, rng),
                    norm_ff: LayerNorm::new(store, &name("norm_ff"), d, g),
                })
            })
            .collect();
        ContextEncoder::Transformer {
            pieces,
            token_embedding,
            position_embedding,
            layers,
            config,
            max_len,
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            ContextEncoder::Static { .. } => EncoderKind::Static,
            ContextEncoder::Transformer { .. } => EncoderKind::Transformer,
        }
    }

    /// Width of the contextual states.
    pub fn dim(&self) -> usize {
        match self {
            ContextEncoder::Static { dim, .. } => *dim,
            ContextEncoder::Transformer { config, .. } => config.d_model,
        }
    }

    pub fn pieces(&self) -> Option<&PieceVocab> {
        match self {
            ContextEncoder::Transformer { pieces, .. } => Some(pieces),
            ContextEncoder::Static { .. } => None,
        }
    }

    /// Encodes a non-empty token list; context is dropped from the left when it does not fit.
    pub fn encode<S: AsRef<str>>(&self, tape: &mut Tape, tokens: &[S]) -> EncodedQuery {
        assert!(!tokens.is_empty(), "cannot encode an empty query");
        match self {
            ContextEncoder::Static {
                table,
                index,
                unk,
                max_len,
                ..
            } => {
                let keep = tokens.len().min(*max_len).max(1);
                let ids: Vec<usize> = tokens[tokens.len() - keep..]
                    .iter()
                    .map(|t| index.get(t.as_ref()).copied().unwrap_or(*unk))
                    .collect();
                let table = tape.param(*table);
                let token_states = tape.gather_rows(table, &ids);
                let aggregate = tape.mean_rows(token_states);
                EncodedQuery {
                    token_states,
                    aggregate,
                    tokens_used: keep,
                }
            }
            ContextEncoder::Transformer {
                pieces,
                token_embedding,
                position_embedding,
                layers,
                config,
                max_len,
            } => {
                let split: Vec<Vec<usize>> = tokens.iter().map(|t| pieces.split(t.as_ref())).collect();
                // [CLS] + pieces + [SEP] must fit the position table
                let budget = max_len.saturating_sub(2).max(1);
                let mut first = split.len();
                let mut used = 0;
                while first > 0 && used + split[first - 1].len() <= budget {
                    first -= 1;
                    used += split[first].len();
                }
                if first == split.len() {
                    // a single over-long word: keep its trailing pieces
                    first = split.len() - 1;
                }
                let kept = &split[first..];
                let mut ids = vec![pieces.id(CLS).unwrap()];
                let mut owner = Vec::new();
                for (w, word_pieces) in kept.iter().enumerate() {
                    let take = word_pieces.len().min(budget);
                    for &p in &word_pieces[word_pieces.len() - take..] {
                        ids.push(p);
                        owner.push(w);
                    }
                }
                ids.push(pieces.id(SEP).unwrap());
                let m = ids.len();

                let tok = tape.param(*token_embedding);
                let pos = tape.param(*position_embedding);
                let tok = tape.gather_rows(tok, &ids);
                let positions: Vec<usize> = (0..m).collect();
                let pos = tape.gather_rows(pos, &positions);
                let mut x = tape.add(tok, pos);
                for layer in layers {
                    x = transformer_block(tape, &layer.0, x, config);
                }

                // mean-pool word pieces back onto their word
                let n = kept.len();
                let mut pool = Array2::zeros((n, m));
                let mut counts = vec![0usize; n];
                for &w in &owner {
                    counts[w] += 1;
                }
                for (k, &w) in owner.iter().enumerate() {
                    pool[[w, k + 1]] = 1.0 / counts[w] as f64;
                }
                let pool = tape.input(pool);
                let token_states = tape.matmul(pool, x);
                let aggregate = tape.row(x, 0);
                EncodedQuery {
                    token_states,
                    aggregate,
                    tokens_used: n,
                }
            }
        }
    }

    /// Inference helper returning plain arrays.
    pub fn encode_values<S: AsRef<str>>(&self, params: &ParamStore, tokens: &[S]) -> (Array2<f64>, Array1<f64>) {
        let mut tape = Tape::new(params);
        let enc = self.encode(&mut tape, tokens);
        let states = tape.value(enc.token_states).clone();
        let aggregate = tape.value(enc.aggregate).row(0).to_owned();
        (states, aggregate)
    }
}

fn transformer_block(tape: &mut Tape, layer: &TransformerLayer, x: Var, config: &TransformerConfig) -> Var {
    let d_head = config.d_model / config.heads;
    let q = layer.query.forward(tape, x);
    let k = layer.key.forward(tape, x);
    let v = layer.value.forward(tape, x);
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(q, lo, hi);
        let kh = tape.slice_cols(k, lo, hi);
        let vh = tape.slice_cols(v, lo, hi);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
        let weights = tape.softmax_rows(scores);
        heads.push(tape.matmul(weights, vh));
    }
    let attended = tape.concat_cols(&heads);
    let attended = layer.output.forward(tape, attended);
    let residual = tape.add(x, attended);
    let x = layer.norm_attn.forward(tape, residual);
    let hidden = layer.ff_in.forward(tape, x);
    let hidden = tape.relu(hidden);
    let hidden = layer.ff_out.forward(tape, hidden);
    let residual = tape.add(x, hidden);
    layer.norm_ff.forward(tape, residual)
}

/// Entity classifier over the fixed entity inventory.
#[derive(Debug, Clone)]
pub enum EntityHead {
    /// `softmax(W C + b)` over the aggregate state.
    Linear(Linear),
    /// Convolutions over token states, max-pooled over time, then a ReLU hidden layer.
    Cnn {
        convs: Vec<(usize, Linear)>,
        hidden: Linear,
        output: Linear,
        dropout: f64,
    },
}

impl EntityHead {
    pub fn new_linear<R: Rng>(store: &mut ParamStore, input_dim: usize, entities: usize, rng: &mut R) -> Self {
        EntityHead::Linear(Linear::new(store, "entity.linear", input_dim, entities, Group::Decoder, rng))
    }

    pub fn new_cnn<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        entities: usize,
        config: &CnnHeadConfig,
        rng: &mut R,
    ) -> Self {
        let g = Group::Decoder;
        let convs = config
            .kernel_sizes
            .iter()
            .map(|&w| {
                (
                    w,
                    Linear::new(store, &format!("entity.conv{w}"), w * input_dim, config.filters, g, rng),
                )
            })
            .collect();
        let pooled = config.filters * config.kernel_sizes.len();
        EntityHead::Cnn {
            convs,
            hidden: Linear::new(store, "entity.hidden", pooled, config.hidden, g, rng),
            output: Linear::new(store, "entity.output", config.hidden, entities, g, rng),
            dropout: config.dropout,
        }
    }

    pub fn kind(&self) -> EntityHeadKind {
        match self {
            EntityHead::Linear(_) => EntityHeadKind::Linear,
            EntityHead::Cnn { .. } => EntityHeadKind::Cnn,
        }
    }

    /// Unnormalised entity scores, `1 x entities`. `rng` enables dropout.
    pub fn logits<R: Rng>(&self, tape: &mut Tape, enc: &EncodedQuery, mut rng: Option<&mut R>) -> Var {
        match self {
            EntityHead::Linear(lin) => lin.forward(tape, enc.aggregate),
            EntityHead::Cnn {
                convs,
                hidden,
                output,
                dropout: rate,
            } => {
                let (n, d) = tape.shape(enc.token_states);
                let widest = convs.iter().map(|(w, _)| *w).max().unwrap_or(1);
                let states = if n < widest {
                    let pad = tape.input(Array2::zeros((widest - n, d)));
                    tape.concat_rows(&[enc.token_states, pad])
                } else {
                    enc.token_states
                };
                let mut pooled = Vec::with_capacity(convs.len());
                for (w, conv) in convs {
                    let windows = tape.unfold(states, *w);
                    let maps = conv.forward(tape, windows);
                    let maps = tape.relu(maps);
                    pooled.push(tape.max_rows(maps));
                }
                let features = tape.concat_cols(&pooled);
                let features = dropout(tape, features, *rate, rng.as_deref_mut());
                let h = hidden.forward(tape, features);
                let h = tape.relu(h);
                let h = dropout(tape, h, *rate, rng.as_deref_mut());
                output.forward(tape, h)
            }
        }
    }
}

/// Recurrent input encoder over the contextual states.
#[derive(Debug, Clone, Copy)]
pub struct QueryEncoder {
    pub lstm: Lstm,
}

/// Encoder states `H_e` and the final state that seeds the decoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub states: Var,
    pub final_state: LstmState,
}

impl QueryEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        QueryEncoder {
            lstm: Lstm::new(store, "query_encoder", input_dim, hidden, Group::Decoder, rng),
        }
    }

    pub fn encode(&self, tape: &mut Tape, token_states: Var) -> EncoderOutput {
        let init = self.lstm.zero_state(tape);
        let (states, final_state) = self.lstm.run(tape, token_states, init);
        EncoderOutput { states, final_state }
    }
}

/// Probability vector over entities for one encoded query (no dropout).
pub fn detect_entity<R: Rng>(tape: &mut Tape, head: &EntityHead, enc: &EncodedQuery) -> Vec<f64> {
    let logits = head.logits::<R>(tape, enc, None);
    let probs = tape.softmax_rows(logits);
    tape.value(probs).row(0).to_vec()
}
