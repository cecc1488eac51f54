//! Skill-specific residual adapters over a frozen conversational language model.

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod dialogue;
pub mod engine;
pub mod error;
pub mod knowledge;
pub mod manager;
pub mod metrics;
pub mod pipeline;
pub mod reranker;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;

pub use error::{Error, Result};
