pub mod attention;
pub mod boltzmann;
pub mod error;
pub mod fast_attention;
pub mod grid;
pub mod rng;
pub mod separation;
pub mod seq;
pub mod surrogate_prompt;
pub mod transformer_builder;

pub use error::{Error, Result};
pub use seq::SeqMatrix;
