//! Toy LLM-based speech recognition with a learnable prompt projector.
//!
//! The pipeline mirrors the usual "speech encoder → projector → frozen LM"
//! layout at desk scale: synthetic frame features stand in for the encoder,
//! a small decoder-only transformer stands in for the LLM, and two MLP
//! projectors map speech features and prompt-token embeddings into the LM's
//! input space. Around it sits an experiment harness for per-prompt WER
//! sweeps and paired significance tests.

pub mod tensor;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod lm;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod projector;
pub mod prompt;
pub mod seed;
pub mod selftest;
pub mod speech;
pub mod train;
