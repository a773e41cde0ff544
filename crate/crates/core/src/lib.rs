//! Decoder-only language models whose token mixer is causal self-attention or
//! an Extractor (SHE / iSHE), trained with AdamW on next-token cross entropy.

mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
