//! Prompt templates, the character tokenizer, and assembly of the full LM
//! input sequence.

mod assemble;
mod template;
mod tokenizer;

use thiserror::Error;

pub use assemble::{assemble, AssembledInput, AssemblyMode, Projection, Span, SpanKind};
pub use template::{
    builtin_template, builtin_templates, resolve_template, PromptTemplate, Segment, BUILTIN_SOURCES, SPEECH_MARKER,
};
pub use tokenizer::{is_plain_char, Tokenizer, BOS, EOS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("template must contain exactly one {{speech}} marker, found {0}")]
    MarkerCount(usize),
    #[error("character {0:?} is not in the tokenizer alphabet")]
    UnknownChar(char),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(usize),
    #[error("unknown template {0:?} (not a built-in name and no {{speech}} marker)")]
    UnknownTemplate(String),
    #[error("train mode needs a transcript")]
    MissingTranscript,
    #[error("speech embeddings are empty")]
    EmptySpeech,
    #[error("projection failed: {0}")]
    Projection(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}
