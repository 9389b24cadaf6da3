//! Modular cross-lingual reranking at desk scale: a micro transformer
//! encoder with reverse-mode autodiff, language and ranking adapters,
//! sparse fine-tuning masks, multi-stage retrieval and evaluation.

pub mod adapters;
pub mod artifact;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod retrieval;
pub mod sftm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
