//! Decoding, WER, comparison statistics and the prompt sweep.

pub mod beam;
pub mod report;
pub mod sweep;
pub mod reference;
pub mod stats;
pub mod wer;
