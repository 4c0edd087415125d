use serde::{Deserialize, Serialize};

use super::PromptError;

/// Marks where the projected speech embeddings go.
pub const SPEECH_MARKER: &str = "{speech}";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Text(String),
    Speech,
}

/// A fixed prompt: literal text around exactly one speech slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    segments: Vec<Segment>,
}

/// The ten prompts of the prompt-sensitivity study, in table order.
pub const BUILTIN_SOURCES: [(&str, &str); 10] = [
    ("empty", "{speech}"),
    ("base", "{speech}<s>USER: Transcribe speech to text.\n ASSISTANT:"),
    ("1", "<s>USER: Transcribe speech to text. {speech}\n ASSISTANT:"),
    ("2", "<s>USER: Transcribe speech to text. Speech: {speech}.\n ASSISTANT:"),
    ("3", "<s>USER: Transcribe the following speech to text: {speech}.\n ASSISTANT:"),
    (
        "4",
        "<s>USER: Transcribe accurately speech to text. English speech: {speech}.\n ASSISTANT:",
    ),
    ("5", "<s>USER: Audio: {speech}.\n Transcribe the preceding audio.\n ASSISTANT:"),
    (
        "6",
        "<s>USER: Audio: {speech}.\n What is being said in the preceding audio?\n ASSISTANT:",
    ),
    ("7", "<s>USER: Transcribe the following audio: {speech}.\n ASSISTANT:"),
    (
        "8",
        "<s>USER: What is being said in the following audio? Audio: {speech}.\n ASSISTANT:",
    ),
];

impl PromptTemplate {
    pub fn parse(name: impl Into<String>, source: &str) -> Result<Self, PromptError> {
        let count = source.matches(SPEECH_MARKER).count();
        if count != 1 {
            return Err(PromptError::MarkerCount(count));
        }
        let (before, after) = source.split_once(SPEECH_MARKER).expect("one marker");
        let mut segments = Vec::with_capacity(3);
        if !before.is_empty() {
            segments.push(Segment::Text(before.to_string()));
        }
        segments.push(Segment::Speech);
        if !after.is_empty() {
            segments.push(Segment::Text(after.to_string()));
        }
        Ok(Self {
            name: name.into(),
            segments,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Source form with the slot written as `{speech}`.
    pub fn render(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.as_str(),
                Segment::Speech => SPEECH_MARKER,
            })
            .collect()
    }

    /// Literal text before the slot.
    pub fn prefix(&self) -> &str {
        match self.segments.first() {
            Some(Segment::Text(t)) => t,
            _ => "",
        }
    }

    /// Literal text after the slot.
    pub fn suffix(&self) -> &str {
        match self.segments.last() {
            Some(Segment::Text(t)) if self.segments.len() > 1 => t,
            _ => "",
        }
    }

    /// True for the speech-only prompt.
    pub fn is_empty(&self) -> bool {
        self.segments == [Segment::Speech]
    }
}

pub fn builtin_templates() -> Vec<PromptTemplate> {
    BUILTIN_SOURCES
        .iter()
        .map(|(name, src)| PromptTemplate::parse(*name, src).expect("built-in templates are well formed"))
        .collect()
}

pub fn builtin_template(name: &str) -> Option<PromptTemplate> {
    builtin_templates().into_iter().find(|t| t.name == name)
}

/// Resolves a built-in name, or parses `spec` as an inline template named
/// `fallback_name`.
pub fn resolve_template(spec: &str, fallback_name: &str) -> Result<PromptTemplate, PromptError> {
    if let Some(t) = builtin_template(spec) {
        return Ok(t);
    }
    if spec.contains(SPEECH_MARKER) {
        return PromptTemplate::parse(fallback_name, spec);
    }
    Err(PromptError::UnknownTemplate(spec.to_string()))
}
