use crate::lm::{LmParams, LmVars};
use crate::projector::{MlpProjector, ProjectorVars};
use crate::tensor::{Real, Tape, Var};

use super::{PromptError, PromptTemplate, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssemblyMode {
    /// Transcript appended with teacher forcing; loss mask populated.
    Train,
    /// Sequence ends at the last prompt position; generation continues there.
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Prompt,
    Speech,
    Transcript,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

/// A prompt projector bound to a tape.
#[derive(Clone, Copy)]
pub struct Projection<'a, T: Real> {
    pub projector: &'a MlpProjector<T>,
    pub vars: &'a ProjectorVars,
    /// When false, `<s>` / `</s>` keep their raw embeddings.
    pub include_specials: bool,
}

#[derive(Clone, Debug)]
pub struct AssembledInput {
    /// `[n×d]`
    pub embeddings: Var,
    /// Next-token target per position; only meaningful where `loss_mask`
    /// is true (0 elsewhere).
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Disjoint, in order, covering every position.
    pub spans: Vec<Span>,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.loss_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss_mask.is_empty()
    }

    pub fn positions(&self, kind: SpanKind) -> impl Iterator<Item = usize> + '_ {
        self.spans
            .iter()
            .filter(move |s| s.kind == kind)
            .flat_map(|s| s.start..s.start + s.len)
    }
}

/// Embeds literal prompt text, projecting it through `pp` when given.
fn embed_prompt<T: Real>(
    tape: &mut Tape<T>,
    tokenizer: &Tokenizer,
    lm: &LmParams<T>,
    lm_vars: &LmVars,
    pp: Option<Projection<'_, T>>,
    text: &str,
) -> Result<Option<(Var, usize)>, PromptError> {
    let ids = tokenizer.encode(text)?;
    if ids.is_empty() {
        return Ok(None);
    }
    let Some(pp) = pp else {
        return Ok(Some((lm.embed_tokens(tape, lm_vars, &ids).map_err(lm_err)?, ids.len())));
    };
    // runs of tokens that share the same projected/raw treatment
    let projected = |id: usize| pp.include_specials || !tokenizer.is_special(id);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < ids.len() {
        let flag = projected(ids[start]);
        let end = start + ids[start..].iter().take_while(|&&id| projected(id) == flag).count();
        let raw = lm.embed_tokens(tape, lm_vars, &ids[start..end]).map_err(lm_err)?;
        parts.push(if flag {
            pp.projector
                .project(tape, pp.vars, raw)
                .map_err(|e| PromptError::Projection(e.to_string()))?
        } else {
            raw
        });
        start = end;
    }
    let joined = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    Ok(Some((joined, ids.len())))
}

fn lm_err(e: crate::lm::LmError) -> PromptError {
    match e {
        crate::lm::LmError::Tensor(t) => PromptError::Tensor(t),
        other => PromptError::Projection(other.to_string()),
    }
}

/// Builds the LM input for one utterance: prompt text around the speech
/// rows (already projected to model width), then in train mode the
/// transcript for teacher forcing. The loss covers the transcript tokens
/// and the closing `</s>`.
#[allow(clippy::too_many_arguments)]
pub fn assemble<T: Real>(
    tape: &mut Tape<T>,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    lm: &LmParams<T>,
    lm_vars: &LmVars,
    pp: Option<Projection<'_, T>>,
    speech: Var,
    transcript: Option<&str>,
    mode: AssemblyMode,
) -> Result<AssembledInput, PromptError> {
    let m = tape.shape(speech)[0];
    if m == 0 {
        return Err(PromptError::EmptySpeech);
    }
    let transcript_ids = match (mode, transcript) {
        (AssemblyMode::Train, None) => return Err(PromptError::MissingTranscript),
        (AssemblyMode::Train, Some(t)) => Some(tokenizer.encode(t)?),
        (AssemblyMode::Infer, _) => None,
    };

    let mut parts = Vec::new();
    let mut spans = Vec::new();
    let push = |parts: &mut Vec<Var>, spans: &mut Vec<Span>, var: Var, kind: SpanKind, len: usize| {
        let start = spans.last().map_or(0, |s: &Span| s.start + s.len);
        spans.push(Span { kind, start, len });
        parts.push(var);
    };
    if let Some((v, n)) = embed_prompt(tape, tokenizer, lm, lm_vars, pp, template.prefix())? {
        push(&mut parts, &mut spans, v, SpanKind::Prompt, n);
    }
    push(&mut parts, &mut spans, speech, SpanKind::Speech, m);
    if let Some((v, n)) = embed_prompt(tape, tokenizer, lm, lm_vars, pp, template.suffix())? {
        push(&mut parts, &mut spans, v, SpanKind::Prompt, n);
    }
    let prompt_len: usize = spans.iter().map(|s| s.len).sum();
    let mut targets = vec![0; prompt_len];
    let mut loss_mask = vec![false; prompt_len];
    if let Some(ids) = transcript_ids {
        if !ids.is_empty() {
            let v = lm.embed_tokens(tape, lm_vars, &ids).map_err(lm_err)?;
            push(&mut parts, &mut spans, v, SpanKind::Transcript, ids.len());
        }
        // position i predicts token i+1: the last prompt position predicts
        // the first transcript token, the last transcript position `</s>`
        targets.extend(std::iter::repeat_n(0, ids.len()));
        loss_mask.extend(std::iter::repeat_n(false, ids.len()));
        for (j, &id) in ids.iter().chain(std::iter::once(&Tokenizer::EOS_ID)).enumerate() {
            targets[prompt_len - 1 + j] = id;
            loss_mask[prompt_len - 1 + j] = true;
        }
    }
    let embeddings = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    Ok(AssembledInput {
        embeddings,
        targets,
        loss_mask,
        spans,
    })
}
