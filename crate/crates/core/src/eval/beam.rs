//! Length-synchronous beam search and greedy decoding over any model that
//! yields next-token log-probabilities.

use std::cmp::Ordering;

use thiserror::Error;

use crate::lm::KvCache;
use crate::model::{ModelBundle, ModelError};
use crate::prompt::{PromptTemplate, Tokenizer};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("max_new_tokens must be at least 1")]
    NoBudget,
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// An autoregressive scorer. `start` consumes the prompt; `step` feeds one
/// chosen token. Both return log-probabilities over the vocabulary.
pub trait StepModel {
    type State: Clone;

    fn eos(&self) -> usize;

    fn start(&self) -> Result<(Self::State, Vec<f64>), DecodeError>;

    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>, DecodeError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending with `</s>` when finished.
    pub tokens: Vec<usize>,
    /// Sum of the chosen per-step log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
}

/// Higher score first; equal scores go to the lexicographically smaller id
/// sequence, which puts lower token ids and then shorter sequences first.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens))
}

pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&x| (x as f64 - max).exp()).sum();
    let lz = max + z.ln();
    logits.iter().map(|&x| x as f64 - lz).collect()
}

/// Keeps the `beam_size` best one-token extensions of the live hypotheses
/// at every step. Finished hypotheses are set aside and never extended.
/// Returns the best finished hypothesis, or the best unfinished one when
/// the budget runs out first.
pub fn beam_search<M: StepModel>(model: &M, beam_size: usize, max_new_tokens: usize) -> Result<Hypothesis, DecodeError> {
    if beam_size == 0 {
        return Err(DecodeError::ZeroBeam);
    }
    if max_new_tokens == 0 {
        return Err(DecodeError::NoBudget);
    }
    let eos = model.eos();
    let (state, first) = model.start()?;
    let root = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    let mut live: Vec<(Hypothesis, M::State, Vec<f64>)> = vec![(root, state, first)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_new_tokens {
        let mut candidates: Vec<(Hypothesis, usize)> = Vec::with_capacity(live.len() * live[0].2.len());
        for (parent, (hyp, _, logp)) in live.iter().enumerate() {
            for (tok, &lp) in logp.iter().enumerate() {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                candidates.push((
                    Hypothesis {
                        tokens,
                        log_prob: hyp.log_prob + lp,
                        finished: tok == eos,
                    },
                    parent,
                ));
            }
        }
        candidates.sort_by(|a, b| rank(&a.0, &b.0));
        candidates.truncate(beam_size);
        let last_step = step + 1 == max_new_tokens;
        let mut next = Vec::new();
        for (hyp, parent) in candidates {
            if hyp.finished {
                finished.push(hyp);
            } else if last_step {
                // budget exhausted: compete as an unfinished hypothesis
                finished.push(hyp);
            } else {
                let mut state = live[parent].1.clone();
                let logp = model.step(&mut state, *hyp.tokens.last().expect("non-empty"))?;
                next.push((hyp, state, logp));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // log-probabilities never increase, so a live hypothesis that is
        // already strictly worse than a finished one cannot overtake it
        let best_live = live.iter().map(|h| h.0.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if finished.iter().any(|f| f.log_prob > best_live) {
            break;
        }
    }
    finished.sort_by(rank);
    Ok(finished.into_iter().next().expect("at least one candidate per step"))
}

/// Picks the most likely token (lowest id on ties) until `</s>` or the
/// budget.
pub fn greedy<M: StepModel>(model: &M, max_new_tokens: usize) -> Result<Hypothesis, DecodeError> {
    if max_new_tokens == 0 {
        return Err(DecodeError::NoBudget);
    }
    let eos = model.eos();
    let (mut state, mut logp) = model.start()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for step in 0..max_new_tokens {
        let (tok, lp) = logp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &lp)| if lp > best.1 { (i, lp) } else { best });
        hyp.tokens.push(tok);
        hyp.log_prob += lp;
        if tok == eos {
            hyp.finished = true;
            break;
        }
        if step + 1 < max_new_tokens {
            logp = model.step(&mut state, tok)?;
        }
    }
    Ok(hyp)
}

/// Decoding view of a trained bundle for one utterance.
pub struct LmDecoder<'a> {
    bundle: &'a ModelBundle<f32>,
    prompt: Vec<f32>,
}

impl<'a> LmDecoder<'a> {
    pub fn new(
        bundle: &'a ModelBundle<f32>,
        template: &PromptTemplate,
        tokenizer: &Tokenizer,
        features: &Tensor<f32>,
    ) -> Result<Self, DecodeError> {
        let prompt = bundle.prompt_rows(template, tokenizer, features)?;
        Ok(Self { bundle, prompt })
    }
}

impl StepModel for LmDecoder<'_> {
    type State = KvCache<f32>;

    fn eos(&self) -> usize {
        Tokenizer::EOS_ID
    }

    fn start(&self) -> Result<(Self::State, Vec<f64>), DecodeError> {
        let lm = &self.bundle.lm;
        let mut cache = lm.new_cache();
        let logits = lm
            .extend(self.bundle.lora.as_ref(), &mut cache, &self.prompt)
            .map_err(ModelError::from)?;
        Ok((cache, log_softmax(&logits)))
    }

    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>, DecodeError> {
        let lm = &self.bundle.lm;
        // generated tokens take the raw embedding path, like teacher forcing
        let row = lm.token_row(token).to_vec();
        let logits = lm.extend(self.bundle.lora.as_ref(), state, &row).map_err(ModelError::from)?;
        Ok(log_softmax(&logits))
    }
}

/// Text of a hypothesis with markup tokens removed.
pub fn hypothesis_text(tokenizer: &Tokenizer, hyp: &Hypothesis) -> String {
    let ids: Vec<usize> = hyp.tokens.iter().copied().filter(|&t| !tokenizer.is_special(t)).collect();
    tokenizer.decode(&ids).expect("ids come from the model vocabulary")
}
