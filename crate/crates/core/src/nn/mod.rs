//! Minimal neural-network toolkit: autodiff tape, parameters, layers, Adam.

pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{dropout, LayerNorm, Linear, Lstm, LstmState};
pub use optim::Adam;
pub use params::{Gradients, Group, Param, ParamId, ParamStore};
pub use tape::{softmax_rows, Mat, Tape, Var, IGNORE};
