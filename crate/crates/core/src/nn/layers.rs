use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Group, ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: Group,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add_glorot(&format!("{name}.weight"), fan_in, fan_out, group, rng),
            bias: store.add_zeros(&format!("{name}.bias"), (1, fan_out), group),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

/// Single-layer LSTM; gate columns are ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `1 x hidden`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        group: Group,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = store.add_uniform(&format!("{name}.w_input"), (input_dim, 4 * hidden), bound, group, rng);
        let w_hidden = store.add_uniform(&format!("{name}.w_hidden"), (hidden, 4 * hidden), bound, group, rng);
        let mut b = ndarray::Array2::zeros((1, 4 * hidden));
        // forget-gate bias starts at 1
        b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let bias = store.add(&format!("{name}.bias"), b, group);
        Lstm {
            w_input,
            w_hidden,
            bias,
            input_dim,
            hidden,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> LstmState {
        let h = tape.input(ndarray::Array2::zeros((1, self.hidden)));
        let c = tape.input(ndarray::Array2::zeros((1, self.hidden)));
        LstmState { h, c }
    }

    /// Input projection `x W_input + b` for a whole sequence at once.
    pub fn project_inputs(&self, tape: &mut Tape, xs: Var) -> Var {
        let w = tape.param(self.w_input);
        let b = tape.param(self.bias);
        let proj = tape.matmul(xs, w);
        tape.add_row(proj, b)
    }

    /// One step given the already projected input row.
    pub fn step_projected(&self, tape: &mut Tape, projected: Var, state: LstmState) -> LstmState {
        let hd = self.hidden;
        let w_h = tape.param(self.w_hidden);
        let rec = tape.matmul(state.h, w_h);
        let gates = tape.add(projected, rec);
        let i = tape.slice_cols(gates, 0, hd);
        let f = tape.slice_cols(gates, hd, 2 * hd);
        let g = tape.slice_cols(gates, 2 * hd, 3 * hd);
        let o = tape.slice_cols(gates, 3 * hd, 4 * hd);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, state.c);
        let write = tape.mul(i, g);
        let c = tape.add(keep, write);
        let c_act = tape.tanh(c);
        let h = tape.mul(o, c_act);
        LstmState { h, c }
    }

    pub fn step(&self, tape: &mut Tape, x: Var, state: LstmState) -> LstmState {
        let projected = self.project_inputs(tape, x);
        self.step_projected(tape, projected, state)
    }

    /// Runs over the rows of `xs`; returns the stacked hidden states and the final state.
    pub fn run(&self, tape: &mut Tape, xs: Var, init: LstmState) -> (Var, LstmState) {
        let n = tape.shape(xs).0;
        let projected = self.project_inputs(tape, xs);
        let mut state = init;
        let mut hs = Vec::with_capacity(n);
        for t in 0..n {
            let row = tape.row(projected, t);
            state = self.step_projected(tape, row, state);
            hs.push(state.h);
        }
        let states = tape.concat_rows(&hs);
        (states, state)
    }
}

/// Affine layer normalisation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, group: Group) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.gain"), ndarray::Array2::ones((1, dim)), group),
            bias: store.add_zeros(&format!("{name}.bias"), (1, dim), group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let rows = tape.shape(x).0;
        let normed = tape.layer_norm(x);
        let gain = tape.param(self.gain);
        // broadcast gain to every row through a ones column
        let ones = tape.input(ndarray::Array2::ones((rows, 1)));
        let gains = tape.matmul(ones, gain);
        let scaled = tape.mul(normed, gains);
        let bias = tape.param(self.bias);
        tape.add_row(scaled, bias)
    }
}

/// Inverted dropout mask applied during training; identity otherwise.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x);
    let mask = ndarray::Array2::from_shape_fn(shape, |_| {
        if rng.random_bool(keep) {
            1.0 / keep
        } else {
            0.0
        }
    });
    let mask = tape.input(mask);
    tape.mul(x, mask)
}
