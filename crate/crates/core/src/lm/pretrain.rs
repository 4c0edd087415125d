//! Pretraining of the toy LM on plain sentences plus transcription-style
//! lines, so that the frozen model already knows how to copy a "speech"
//! span into text after an instruction.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LmError, LmParams, Result};
use crate::params::ParamSet;
use crate::prompt::Tokenizer;
use crate::seed::derive_seed;
use crate::speech::{durations, row_symbols, SynthConfig};
use crate::tensor::Tape;
use crate::train::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of corpus lines held out for the dev loss.
    pub dev_fraction: f64,
    pub eval_interval: usize,
    /// Linear warmup length; the rate then follows a cosine down to
    /// `learning_rate * min_lr_fraction` at the last step.
    pub warmup_steps: usize,
    pub min_lr_fraction: f64,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Transcription-style lines generated per corpus sentence.
    pub instruction_lines_per_sentence: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            learning_rate: 2e-3,
            dev_fraction: 0.05,
            eval_interval: 250,
            warmup_steps: 100,
            min_lr_fraction: 0.1,
            seed: 0,
            adamw: AdamWConfig::default(),
            instruction_lines_per_sentence: 3,
        }
    }
}

impl PretrainConfig {
    /// Learning rate used for the 1-based `step`.
    pub fn rate_at(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.learning_rate * step as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.learning_rate * self.min_lr_fraction;
        floor + (self.learning_rate - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean next-token loss (nats/token) on the held-out lines before any
    /// update.
    pub initial_dev_loss: f64,
    pub final_dev_loss: f64,
    /// `(step, dev loss)`
    pub dev_curve: Vec<(usize, f64)>,
    pub train_lines: usize,
    pub dev_lines: usize,
}

const INSTRUCTIONS: [&str; 8] = [
    "Write down the speech.",
    "Please transcribe this recording.",
    "Convert the audio to text.",
    "Give the words spoken.",
    "Transcribe the clip.",
    "Write what you hear.",
    "Speech to text please.",
    "Repeat the spoken words.",
];

const LABELS: [&str; 5] = ["Speech", "Audio", "Clip", "Recording", "Sound"];

const FOLLOW_UPS: [&str; 3] = ["Write it down.", "What words are spoken in it?", "Give the text of the clip."];

/// Stand-in for projected speech: the dominant character of every
/// downsampled row of a synthetic rendering of `text`.
pub fn pseudo_speech(text: &str, seed: u64, synth: &SynthConfig, k: usize) -> String {
    row_symbols(text, &durations(text, seed, synth), k).into_iter().collect()
}

/// Plain `<s>sentence</s>` lines plus transcription-formatted lines whose
/// instruction wording and layout vary. The speech slot holds
/// [`pseudo_speech`]; the transcript follows `ASSISTANT:` directly. Every
/// other transcription line carries a random word sequence over the corpus
/// vocabulary instead of a real sentence, so that reading the speech slot
/// pays off more than recalling memorized sentences.
pub fn build_corpus(sentences: &[String], synth: &SynthConfig, k: usize, per_sentence: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["pretrain-corpus"]));
    let mut vocab: Vec<&str> = sentences.iter().flat_map(|s| s.split_whitespace()).collect();
    vocab.sort_unstable();
    vocab.dedup();
    let mut out = Vec::with_capacity(sentences.len() * (per_sentence + 1));
    for s in sentences {
        out.push(format!("<s>{s}</s>"));
        for j in 0..per_sentence {
            let text = if j % 2 == 1 && !vocab.is_empty() {
                let n = rng.random_range(2..=5);
                let words: Vec<&str> = (0..n).map(|_| *vocab.choose(&mut rng).expect("non-empty")).collect();
                words.join(" ")
            } else {
                s.clone()
            };
            let s = &text;
            let speech = pseudo_speech(s, rng.random(), synth, k);
            let instr = INSTRUCTIONS.choose(&mut rng).expect("non-empty");
            let label = LABELS.choose(&mut rng).expect("non-empty");
            let follow = FOLLOW_UPS.choose(&mut rng).expect("non-empty");
            let prompt = match rng.random_range(0..5) {
                0 => format!("<s>USER: {instr} {speech}\n ASSISTANT:"),
                1 => format!("{speech}<s>USER: {instr}\n ASSISTANT:"),
                2 => format!("<s>USER: {label}: {speech}.\n {follow}\n ASSISTANT:"),
                3 => format!("<s>USER: {instr} {label}: {speech}.\n ASSISTANT:"),
                _ => format!("<s>USER: {label}: {speech}.\n {instr}\n ASSISTANT:"),
            };
            out.push(format!("{prompt}{s}</s>"));
        }
    }
    out
}

/// Mean next-token loss over every position of every line.
fn corpus_loss(params: &LmParams<f32>, lines: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for ids in lines {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        total += line_loss(params, &mut tape, &vars, ids).map(|v| tape.value(v)[0] as f64)?;
    }
    Ok(total / lines.len() as f64)
}

fn line_loss(params: &LmParams<f32>, tape: &mut Tape<f32>, vars: &super::LmVars, ids: &[usize]) -> Result<crate::tensor::Var> {
    let n = ids.len() - 1;
    let x = params.embed_tokens(tape, vars, &ids[..n])?;
    let logits = params.forward_logits(tape, vars, None, x)?;
    Ok(tape.masked_cross_entropy(logits, &ids[1..], &vec![true; n])?)
}

/// Trains every LM tensor on next-token prediction over `corpus`.
pub fn pretrain_lm(
    params: &mut LmParams<f32>,
    tokenizer: &Tokenizer,
    corpus: &[String],
    config: &PretrainConfig,
) -> Result<PretrainLog> {
    let mut encoded = Vec::with_capacity(corpus.len());
    for line in corpus {
        let ids = tokenizer
            .encode(line)
            .map_err(|e| LmError::Config(format!("corpus line {line:?}: {e}")))?;
        if ids.len() >= 2 {
            encoded.push(ids);
        }
    }
    if encoded.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    if config.batch_size == 0 || config.eval_interval == 0 {
        return Err(LmError::Config("batch_size and eval_interval must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["pretrain"]));
    let n_dev = ((encoded.len() as f64 * config.dev_fraction).round() as usize).min(encoded.len() - 1);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let dev: Vec<Vec<usize>> = if n_dev == 0 {
        // a one-line corpus is its own held-out set
        vec![encoded[order[0]].clone()]
    } else {
        order[..n_dev].iter().map(|&i| encoded[i].clone()).collect()
    };
    let train: Vec<&Vec<usize>> = order[n_dev..].iter().map(|&i| &encoded[i]).collect();

    params.set_all_trainable(true);
    let mut opt = AdamW::new(config.adamw.clone());
    let initial = corpus_loss(params, &dev)?;
    let mut dev_curve = vec![(0, initial)];
    for step in 1..=config.steps {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let w = 1.0 / config.batch_size as f32;
        let mut total = None;
        for _ in 0..config.batch_size {
            let ids = train[rng.random_range(0..train.len())];
            let l = line_loss(params, &mut tape, &vars, ids)?;
            let l = tape.scale(l, w)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        tape.backward(total.expect("batch_size >= 1"))?;
        params.pull_grads(&tape, &vars.all);
        opt.step(params.tensors_mut(), config.rate_at(step))
            .map_err(|e| LmError::Config(e.to_string()))?;
        if step % config.eval_interval == 0 || step == config.steps {
            dev_curve.push((step, corpus_loss(params, &dev)?));
        }
    }
    Ok(PretrainLog {
        initial_dev_loss: initial,
        final_dev_loss: dev_curve.last().expect("initial point").1,
        dev_curve,
        train_lines: train.len(),
        dev_lines: dev.len(),
    })
}
