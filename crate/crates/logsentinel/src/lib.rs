pub mod checkpoint;
pub mod config;
pub mod detect;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod model;
pub mod parser;
pub mod rng;
pub mod sequence;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
