//! Attentive LSTM decoder over the extended vocabulary, gate fusion and beam search.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::Rng;

use crate::graph::VocabGate;
use crate::nn::{dropout, Group, Linear, Lstm, LstmState, Mat, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct Decoder {
    pub embedding: ParamId,
    pub lstm: Lstm,
    /// Attention projections of encoder states and decoder state (`W_c` split by block).
    pub attn_enc: ParamId,
    pub attn_dec: ParamId,
    pub attn_score: ParamId,
    pub output: Linear,
    pub vocab_size: usize,
    pub hidden: usize,
}

/// Value-level decoder state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Mat,
    pub c: Mat,
    pub prev: usize,
}

impl Decoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        emb_dim: usize,
        enc_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let g = Group::Decoder;
        Decoder {
            embedding: store.add_uniform("decoder.embedding", (vocab_size, emb_dim), 0.1, g, rng),
            lstm: Lstm::new(store, "decoder.lstm", emb_dim, hidden, g, rng),
            attn_enc: store.add_glorot("decoder.attn_enc", enc_dim, hidden, g, rng),
            attn_dec: store.add_glorot("decoder.attn_dec", hidden, hidden, g, rng),
            attn_score: store.add_glorot("decoder.attn_score", hidden, 1, g, rng),
            output: Linear::new(store, "decoder.output", hidden + enc_dim, vocab_size, g, rng),
            vocab_size,
            hidden,
        }
    }

    /// Precomputes `H_e W_c1`, shared by every step.
    pub fn project_memory(&self, tape: &mut Tape, memory: Var) -> Var {
        let w = tape.param(self.attn_enc);
        tape.matmul(memory, w)
    }

    /// Returns `(weights 1 x N, context 1 x enc_dim)`.
    pub fn attend(&self, tape: &mut Tape, memory: Var, projected: Var, h: Var) -> (Var, Var) {
        let w_dec = tape.param(self.attn_dec);
        let query = tape.matmul(h, w_dec);
        let hidden = tape.add_row(projected, query);
        let hidden = tape.tanh(hidden);
        let w_s = tape.param(self.attn_score);
        let scores = tape.matmul(hidden, w_s);
        let scores = tape.transpose(scores);
        let weights = tape.softmax_rows(scores);
        let context = tape.matmul(weights, memory);
        (weights, context)
    }

    /// One step: returns output logits `1 x v_od` and the next recurrent state.
    pub fn step<R: Rng>(
        &self,
        tape: &mut Tape,
        memory: Var,
        projected: Var,
        state: LstmState,
        prev: usize,
        rate: f64,
        rng: Option<&mut R>,
    ) -> (Var, LstmState) {
        let table = tape.param(self.embedding);
        let x = tape.gather_rows(table, &[prev]);
        let state = self.lstm.step(tape, x, state);
        let (_, context) = self.attend(tape, memory, projected, state.h);
        let joined = tape.concat_cols(&[state.h, context]);
        let joined = dropout(tape, joined, rate, rng);
        (self.output.forward(tape, joined), state)
    }

    /// Teacher-forced logits for inputs `<SOS> y_1 .. y_n`, one row per step.
    /// Input projections and the output layer run once over all steps.
    pub fn teacher_forced<R: Rng>(
        &self,
        tape: &mut Tape,
        memory: Var,
        init: LstmState,
        inputs: &[usize],
        rate: f64,
        rng: Option<&mut R>,
    ) -> Var {
        let projected = self.project_memory(tape, memory);
        let table = tape.param(self.embedding);
        let xs = tape.gather_rows(table, inputs);
        let gates_in = self.lstm.project_inputs(tape, xs);
        let mut state = init;
        let mut rows = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let x = tape.row(gates_in, t);
            state = self.lstm.step_projected(tape, x, state);
            let (_, context) = self.attend(tape, memory, projected, state.h);
            rows.push(tape.concat_cols(&[state.h, context]));
        }
        let joined = tape.concat_rows(&rows);
        let joined = dropout(tape, joined, rate, rng);
        self.output.forward(tape, joined)
    }

    /// `O_dec` for one inference step.
    pub fn decode_step(&self, params: &ParamStore, memory: &Mat, state: &DecoderState) -> (Vec<f64>, DecoderState) {
        let mut tape = Tape::new(params);
        let mem = tape.input(memory.clone());
        let projected = self.project_memory(&mut tape, mem);
        let h = tape.input(state.h.clone());
        let c = tape.input(state.c.clone());
        let (logits, next) = self.step::<rand::rngs::ThreadRng>(&mut tape, mem, projected, LstmState { h, c }, state.prev, 0.0, None);
        let probs = tape.softmax_rows(logits);
        let out = tape.value(probs).row(0).to_vec();
        let next = DecoderState {
            h: tape.value(next.h).clone(),
            c: tape.value(next.c).clone(),
            prev: state.prev,
        };
        (out, next)
    }
}

/// Hadamard product with the gate, renormalised. When nothing survives, relation
/// tokens (ids at or above `num_words`) are zeroed in `O_dec` instead.
pub fn fuse(o_dec: &[f64], gate: &VocabGate, num_words: usize) -> Vec<f64> {
    assert_eq!(o_dec.len(), gate.len(), "gate and distribution lengths differ");
    let product: Vec<f64> = o_dec.iter().zip(&gate.0).map(|(p, g)| p * g).collect();
    if let Some(out) = normalise(product) {
        return out;
    }
    log::warn!("gate removed all probability mass; falling back to word tokens");
    let words: Vec<f64> = o_dec
        .iter()
        .enumerate()
        .map(|(i, &p)| if i < num_words { p } else { 0.0 })
        .collect();
    normalise(words).unwrap_or_else(|| o_dec.to_vec())
}

fn normalise(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let total: f64 = v.iter().sum();
    if total > 0.0 && total.is_finite() {
        v.iter_mut().for_each(|x| *x /= total);
        Some(v)
    } else {
        None
    }
}

/// Anything that yields a next-token distribution from a state and the previous token.
pub trait StepModel {
    type State: Clone;
    fn start(&self) -> Self::State;
    fn step(&self, state: &Self::State, prev: usize) -> (Vec<f64>, Self::State);
}

#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    /// Emitted tokens, ending with `<EOS>` when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

fn rank<S>(a: &Hypothesis<S>, b: &Hypothesis<S>) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search from `<SOS>`; ties go to the lexicographically smaller token sequence.
///
/// The result is the best hypothesis over passes with widths `1..=width`, so a
/// wider beam never returns a lower log probability. Finished hypotheses beat
/// unfinished ones; the latter are returned only when nothing finished.
pub fn beam_search<M: StepModel>(model: &M, sos: usize, eos: usize, width: usize, max_len: usize) -> Hypothesis<M::State> {
    assert!(width >= 1 && max_len >= 1, "beam width and max_len must be positive");
    let mut best = beam_pass(model, sos, eos, 1, max_len);
    for w in 2..=width {
        let hyp = beam_pass(model, sos, eos, w, max_len);
        let better = match (hyp.finished, best.finished) {
            (true, false) => true,
            (false, true) => false,
            _ => rank(&hyp, &best) == Ordering::Less,
        };
        if better {
            best = hyp;
        }
    }
    best
}

/// A single fixed-width beam pass.
pub fn beam_pass<M: StepModel>(model: &M, sos: usize, eos: usize, width: usize, max_len: usize) -> Hypothesis<M::State> {
    assert!(width >= 1 && max_len >= 1, "beam width and max_len must be positive");
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start(),
        finished: false,
    }];
    let mut done: Vec<Hypothesis<M::State>> = Vec::new();
    for _ in 0..max_len {
        let mut candidates = Vec::new();
        for hyp in &live {
            let prev = hyp.tokens.last().copied().unwrap_or(sos);
            let (probs, next) = model.step(&hyp.state, prev);
            for (tok, &p) in probs.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + p.ln(),
                    state: next.clone(),
                    finished: tok == eos,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        live.clear();
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        let best_done = done.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        // log probabilities only fall, so no live hypothesis can still win
        if live.is_empty() || best_done > best_live {
            break;
        }
    }
    done.sort_by(rank);
    if let Some(best) = done.into_iter().next() {
        return best;
    }
    live.sort_by(rank);
    live.into_iter().next().unwrap_or(Hypothesis {
        tokens: Vec::new(),
        log_prob: f64::NEG_INFINITY,
        state: model.start(),
        finished: false,
    })
}

/// Argmax decoding with ties to the lower token id.
pub fn greedy<M: StepModel>(model: &M, sos: usize, eos: usize, max_len: usize) -> Hypothesis<M::State> {
    let mut state = model.start();
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let prev = tokens.last().copied().unwrap_or(sos);
        let (probs, next) = model.step(&state, prev);
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        if probs[best] <= 0.0 {
            break;
        }
        tokens.push(best);
        log_prob += probs[best].ln();
        state = next;
        if best == eos {
            return Hypothesis {
                tokens,
                log_prob,
                state,
                finished: true,
            };
        }
    }
    Hypothesis {
        tokens,
        log_prob,
        state,
        finished: false,
    }
}

/// Decoder plus fixed memory and gate, seen as a step model for search.
pub struct GatedDecoder<'a> {
    pub decoder: &'a Decoder,
    pub params: &'a ParamStore,
    pub memory: Mat,
    pub init: (Mat, Mat),
    pub gate: Option<&'a VocabGate>,
    pub num_words: usize,
}

impl StepModel for GatedDecoder<'_> {
    type State = DecoderState;

    fn start(&self) -> DecoderState {
        DecoderState {
            h: self.init.0.clone(),
            c: self.init.1.clone(),
            prev: 0,
        }
    }

    fn step(&self, state: &DecoderState, prev: usize) -> (Vec<f64>, DecoderState) {
        let input = DecoderState {
            prev,
            ..state.clone()
        };
        let (probs, mut next) = self.decoder.decode_step(self.params, &self.memory, &input);
        next.prev = prev;
        let probs = match self.gate {
            Some(g) => fuse(&probs, g, self.num_words),
            None => probs,
        };
        (probs, next)
    }
}

/// Zero initial state for callers without an encoder.
pub fn zero_state(hidden: usize) -> (Mat, Mat) {
    (Array2::zeros((1, hidden)), Array2::zeros((1, hidden)))
}
