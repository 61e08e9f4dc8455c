pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kg;
pub mod model;
pub mod nn;
pub mod service;
pub mod training;

pub use error::{Error, Result};
