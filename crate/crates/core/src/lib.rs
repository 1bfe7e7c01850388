//! Corpus generation, transformer training and analysis for implicit
//! meta-learning experiments.

pub mod analysis;
pub mod config;
pub mod error;
pub mod forge;
pub mod hash;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tokenizer;
pub mod train;

pub use error::{CoreError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
