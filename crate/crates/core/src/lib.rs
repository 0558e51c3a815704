//! Topic-guided self-introduction generation.
//!
//! The crate covers the whole pipeline: corpus handling, similarity-based
//! selection of representative history documents, a VAE topic model, a
//! transformer encoder-decoder conditioned on topic prompts, decoding steered
//! toward topic words, training and ROUGE evaluation.

pub mod error;
pub mod numeric;

pub use error::{Error, Result};
pub mod corpus;
pub mod rng;
pub mod similarity;
pub mod selection;
pub mod nn;
pub mod ntm;
pub mod generator;
pub mod control;
pub mod config;
pub mod pipeline;
pub mod training;
pub mod evaluation;
pub mod synth;
