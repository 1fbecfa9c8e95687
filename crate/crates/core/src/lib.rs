//! Unsupervised aspect and aspect-term co-extraction.
//!
//! A convolutional multi-attention model learns K aspect vectors in word
//! embedding space from unlabeled sentences. Each aspect owns an attention
//! column over the sentence's tokens, so predicting an aspect also points at
//! the words that evidence it.

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod linalg;
pub mod model;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod objective;
pub mod pipeline;
pub mod synthdata;

pub use error::{Error, Result};
