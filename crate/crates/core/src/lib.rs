//! Collaborative residual quantization of tool embeddings into short
//! compositional code sequences, with optimal-transport balancing of the
//! final level, prefix-trie constrained decoding, and retrieval evaluation.

pub mod codec;
pub mod collab;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod persistence;
pub mod quantizer;
pub mod rng;
pub mod sinkhorn;

pub use error::{Error, Result};
