//! Invariant checks behind the `selftest` and `gradcheck` subcommands:
//! finite-difference gradients of every tape operation and of the full
//! model loss, a brute-force WER oracle, a brute-force beam-search oracle,
//! and template round trips.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::beam::{beam_search, greedy, rank, DecodeError, Hypothesis, StepModel};
use crate::eval::wer::wer;
use crate::lm::{LmConfig, LmParams};
use crate::model::{ModelBundle, Stage};
use crate::projector::{InitScheme, MlpProjector, ProjectorRole};
use crate::prompt::{builtin_template, builtin_templates, PromptTemplate, Tokenizer, BUILTIN_SOURCES};
use crate::seed::derive_seed;
use crate::tensor::gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// One line of self-test output.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckLine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// `Σ x·w` with a fixed random `w`, so row-normalized outputs still carry
/// gradient.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(x).to_vec();
    let cols = shape[shape.len() - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(vec![cols, 1], (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let y = tape.matmul(x, w)?;
    tape.sum(y)
}

type OpLoss = Box<dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// Random inputs and a scalar loss for one operation.
fn op_case(op: &str, seed: u64) -> (Vec<Tensor<f64>>, OpLoss) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["op", op]));
    let n = rng.random_range(2..5);
    let m = rng.random_range(2..5);
    let k = rng.random_range(2..5);
    match op {
        "matmul" => (
            vec![random(&mut rng, &[n, k]), random(&mut rng, &[k, m])],
            Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, seed)
            }),
        ),
        "matmul_nt" => (
            vec![random(&mut rng, &[n, k]), random(&mut rng, &[m, k])],
            Box::new(move |t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                weighted_sum(t, y, seed)
            }),
        ),
        "add" => (
            vec![random(&mut rng, &[n, m]), random(&mut rng, &[n, m])],
            Box::new(move |t, v| {
                let y = t.add(v[0], v[1])?;
                weighted_sum(t, y, seed)
            }),
        ),
        "add_bias" => (
            vec![random(&mut rng, &[n, m]), random(&mut rng, &[m])],
            Box::new(move |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                weighted_sum(t, y, seed)
            }),
        ),
        "scale" => (
            vec![random(&mut rng, &[n, m])],
            Box::new(move |t, v| {
                let y = t.scale(v[0], -1.7)?;
                weighted_sum(t, y, seed)
            }),
        ),
        "relu" => (
            vec![random(&mut rng, &[n, m])],
            Box::new(move |t, v| {
                let y = t.relu(v[0])?;
                weighted_sum(t, y, seed)
            }),
        ),
        "sum" => (
            vec![random(&mut rng, &[n, m])],
            Box::new(|t, v| {
                let sq = t.matmul_nt(v[0], v[0])?;
                t.sum(sq)
            }),
        ),
        "softmax_rows" => (
            vec![random(&mut rng, &[n, m])],
            Box::new(move |t, v| {
                let y = t.softmax_rows(v[0])?;
                weighted_sum(t, y, seed)
            }),
        ),
        "layer_norm" => {
            let d = m + 2;
            (
                vec![random(&mut rng, &[n, d]), random(&mut rng, &[d]), random(&mut rng, &[d])],
                Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2])?;
                    weighted_sum(t, y, seed)
                }),
            )
        }
        "embedding" => {
            let ids: Vec<usize> = (0..n + 2).map(|_| rng.random_range(0..k)).collect();
            (
                vec![random(&mut rng, &[k, m])],
                Box::new(move |t, v| {
                    let y = t.embedding(v[0], &ids)?;
                    weighted_sum(t, y, seed)
                }),
            )
        }
        "concat_rows" => (
            vec![random(&mut rng, &[n, m]), random(&mut rng, &[k, m])],
            Box::new(move |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                weighted_sum(t, y, seed)
            }),
        ),
        "causal_attention" => {
            let heads = rng.random_range(1..3);
            let d = heads * rng.random_range(2..4);
            let len = n + 1;
            (
                vec![
                    random(&mut rng, &[len, d]),
                    random(&mut rng, &[len, d]),
                    random(&mut rng, &[len, d]),
                ],
                Box::new(move |t, v| {
                    let y = t.causal_attention(v[0], v[1], v[2], heads)?;
                    weighted_sum(t, y, seed)
                }),
            )
        }
        "masked_cross_entropy" => {
            let vocab = m + 1;
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            mask[0] = true;
            (
                vec![random(&mut rng, &[n, vocab])],
                Box::new(move |t, v| t.masked_cross_entropy(v[0], &targets, &mask)),
            )
        }
        other => panic!("no gradient case for {other}"),
    }
}

pub const OPS: [&str; 13] = [
    "matmul",
    "matmul_nt",
    "add",
    "add_bias",
    "scale",
    "relu",
    "sum",
    "softmax_rows",
    "layer_norm",
    "embedding",
    "concat_rows",
    "causal_attention",
    "masked_cross_entropy",
];

/// Largest relative error of one operation at one seed.
pub fn op_gradcheck(op: &str, seed: u64) -> Result<GradCheckReport, TensorError> {
    let (tensors, f) = op_case(op, seed);
    let mut params: Vec<(String, Tensor<f64>)> = tensors
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("{op}.input{i}"), t))
        .collect();
    finite_diff_check(&mut params, &GradCheckOptions::default(), f)
}

/// Small double-precision bundle with every group trainable.
pub fn tiny_bundle(seed: u64, with_pp: bool) -> ModelBundle<f64> {
    let config = LmConfig {
        vocab_size: Tokenizer::new().vocab_size(),
        model_dim: 12,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 24,
        max_sequence_length: 160,
        seed,
    };
    let lm = LmParams::init(&config).expect("valid tiny config");
    let sp = MlpProjector::init(ProjectorRole::Speech, 8, 10, 12, derive_seed(seed, &["sp"]), InitScheme::KaimingUniform)
        .expect("valid extents");
    let pp = with_pp.then(|| {
        MlpProjector::init(ProjectorRole::Prompt, 12, 10, 12, derive_seed(seed, &["pp"]), InitScheme::KaimingUniform)
            .expect("valid extents")
    });
    let mut bundle = ModelBundle {
        lm,
        sp,
        pp,
        lora: None,
        downsample_k: 2,
        pp_include_specials: true,
        stages: vec![Stage::PretrainLm, Stage::TrainSp],
    };
    for (_, t) in bundle.named_tensors_mut() {
        t.set_requires_grad(true);
    }
    bundle
}

/// Finite-difference check of the utterance loss with respect to every
/// tensor of `bundle`, sampling at most `max_coords` entries per tensor.
/// Coordinates whose perturbation flips a ReLU input are skipped.
pub fn model_gradcheck(
    bundle: &mut ModelBundle<f64>,
    template: &PromptTemplate,
    features: &Tensor<f64>,
    transcript: &str,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, crate::model::ModelError> {
    let tok = Tokenizer::new();
    let eval = |b: &ModelBundle<f64>, with_grad: bool| -> Result<(f64, Vec<bool>, Vec<Vec<f64>>), crate::model::ModelError> {
        let mut tape = Tape::new();
        let bound = b.bind(&mut tape);
        let loss = b.utterance_loss(&mut tape, &bound, template, &tok, features, transcript)?;
        let value = tape.value(loss)[0];
        let pattern = tape.relu_pattern();
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(loss)?;
            let mut copy = b.clone();
            copy.pull_grads(&tape, &bound);
            grads = copy
                .named_tensors()
                .into_iter()
                .map(|(_, t)| t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
        }
        Ok((value, pattern, grads))
    };
    let (_, base_pattern, grads) = eval(bundle, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<(String, usize)> = bundle.named_tensors().into_iter().map(|(n, t)| (n, t.numel())).collect();
    let mut report = GradCheckReport { params: Vec::new() };
    for (pi, (name, numel)) in names.iter().enumerate() {
        let coords: Vec<usize> = if *numel > max_coords {
            let mut c = rand::seq::index::sample(&mut rng, *numel, max_coords).into_vec();
            c.sort_unstable();
            c
        } else {
            (0..*numel).collect()
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for idx in coords {
            let set = |b: &mut ModelBundle<f64>, v: f64| {
                b.named_tensors_mut()[pi].1.data_mut()[idx] = v;
            };
            let orig = bundle.named_tensors()[pi].1.data()[idx];
            set(bundle, orig + step);
            let plus = eval(bundle, false);
            set(bundle, orig - step);
            let minus = eval(bundle, false);
            set(bundle, orig);
            let ((fp, pp, _), (fm, pm, _)) = (plus?, minus?);
            if pp != base_pattern || pm != base_pattern {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grads[pi][idx];
            let err = relative_error(analytic, numeric);
            check.checked += 1;
            if err > check.max_rel_error || check.worst.is_none() {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = Some((idx, analytic, numeric));
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// End-to-end loss check for one template with the prompt projector on.
pub fn end_to_end_gradcheck(template: &str, seed: u64) -> Result<GradCheckReport, crate::model::ModelError> {
    let template = builtin_template(template).expect("built-in template");
    let mut bundle = tiny_bundle(seed, true);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["features"]));
    let rows = rng.random_range(2..5);
    let features = random(&mut rng, &[rows, 8]);
    let words = ["ab", "cat", "dog", "sun"];
    let transcript = format!(
        "{} {}",
        words[rng.random_range(0..words.len())],
        words[rng.random_range(0..words.len())]
    );
    model_gradcheck(&mut bundle, &template, &features, &transcript, 1e-5, 6, seed)
}

/// Every operation and the end-to-end loss (templates `base` and `3`) over
/// `seeds` seeds. One line per operation with the worst error seen.
pub fn gradient_suite(seeds: u64) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    let mut push = |name: String, results: Vec<Result<GradCheckReport, String>>| {
        let mut worst = 0.0f64;
        let mut checked = 0;
        let mut error = None;
        for r in results {
            match r {
                Ok(rep) => {
                    worst = worst.max(rep.max_rel_error());
                    checked += rep.checked();
                }
                Err(e) => error = Some(e),
            }
        }
        lines.push(match error {
            Some(e) => CheckLine {
                name,
                passed: false,
                detail: e,
            },
            None => CheckLine {
                name,
                passed: worst < GRAD_TOLERANCE && checked > 0,
                detail: format!("max rel error {worst:.3e} over {checked} coordinates, {seeds} seeds"),
            },
        });
    };
    for op in OPS {
        push(
            format!("grad {op}"),
            (0..seeds).map(|s| op_gradcheck(op, s).map_err(|e| e.to_string())).collect(),
        );
    }
    for template in ["base", "3"] {
        push(
            format!("grad end-to-end template {template} with pp"),
            (0..seeds)
                .map(|s| end_to_end_gradcheck(template, s).map_err(|e| e.to_string()))
                .collect(),
        );
    }
    lines
}

/// Edit distance by memoized recursion, independent of the DP in
/// [`crate::eval::wer`].
fn edit_distance_recursive(a: &[String], b: &[String]) -> usize {
    fn go(a: &[String], b: &[String], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo) + 1;
        let ins = go(a, b, i, j + 1, memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn wer_oracle(pairs: usize, seed: u64) -> CheckLine {
    let words = ["a", "b", "c", "cat", "dog", "the", "sun"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..pairs {
        let mut sentence = |min: usize| -> Vec<String> {
            let n = rng.random_range(min..8);
            (0..n).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
        };
        let r = sentence(1);
        let h = sentence(0);
        let expected = edit_distance_recursive(&r, &h);
        match wer(&r.join(" "), &h.join(" ")) {
            Ok(s) if s.edits == expected && s.ref_words == r.len() => {}
            _ => mismatches += 1,
        }
    }
    CheckLine {
        name: "wer vs recursive edit distance".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches} mismatches over {pairs} random pairs"),
    }
}

/// Toy autoregressive model over a tiny vocabulary whose log-probabilities
/// depend on the whole prefix (a seeded hash of it), with logits scaled by
/// `sharpness`.
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub seed: u64,
    pub vocab: usize,
    pub sharpness: f64,
}

impl ToyModel {
    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let key: Vec<String> = prefix.iter().map(|t| t.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[&key.join(",")]));
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| self.sharpness * rng.random_range(-1.0..1.0))
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lz = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lz).collect()
    }
}

impl StepModel for ToyModel {
    type State = Vec<usize>;

    fn eos(&self) -> usize {
        self.vocab - 1
    }

    fn start(&self) -> Result<(Self::State, Vec<f64>), DecodeError> {
        Ok((Vec::new(), self.log_probs(&[])))
    }

    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>, DecodeError> {
        state.push(token);
        Ok(self.log_probs(state))
    }
}

/// Best sequence by total log-probability among all sequences that end in
/// `</s>` within `max_len` tokens or run to exactly `max_len` tokens.
pub fn enumerate_best(model: &ToyModel, max_len: usize) -> Hypothesis {
    let mut best: Option<Hypothesis> = None;
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let lp = model.log_probs(&prefix);
        for (tok, &l) in lp.iter().enumerate() {
            let mut tokens = prefix.clone();
            tokens.push(tok);
            let total = score + l;
            let done = tok == model.eos();
            if done || tokens.len() == max_len {
                let cand = Hypothesis {
                    tokens,
                    log_prob: total,
                    finished: done,
                };
                if best.as_ref().is_none_or(|b| rank(&cand, b).is_lt()) {
                    best = Some(cand);
                }
            } else {
                stack.push((tokens, total));
            }
        }
    }
    best.expect("vocabulary is non-empty")
}

pub const TOY_SHARPNESS: f64 = 4.0;

pub fn beam_oracle(prompts: u64) -> Vec<CheckLine> {
    let mut enum_mismatch = 0;
    let mut greedy_mismatch = 0;
    for p in 0..prompts {
        let model = ToyModel {
            seed: derive_seed(p, &["toy-prompt"]),
            vocab: 3,
            sharpness: TOY_SHARPNESS,
        };
        let best = enumerate_best(&model, 4);
        match beam_search(&model, 4, 4) {
            Ok(h) if h.tokens == best.tokens && h.log_prob == best.log_prob => {}
            _ => enum_mismatch += 1,
        }
        let b1 = beam_search(&model, 1, 6);
        let g = greedy(&model, 6);
        match (b1, g) {
            (Ok(a), Ok(b)) if a == b => {}
            _ => greedy_mismatch += 1,
        }
    }
    vec![
        CheckLine {
            name: "beam 4 vs exhaustive enumeration (vocab 3, length 4)".into(),
            passed: enum_mismatch == 0,
            detail: format!("{enum_mismatch} mismatches over {prompts} prompts"),
        },
        CheckLine {
            name: "beam 1 vs greedy".into(),
            passed: greedy_mismatch == 0,
            detail: format!("{greedy_mismatch} mismatches over {prompts} prompts"),
        },
    ]
}

pub fn template_round_trips() -> CheckLine {
    let bad: Vec<&str> = builtin_templates()
        .iter()
        .zip(BUILTIN_SOURCES)
        .filter(|(t, (_, src))| {
            PromptTemplate::parse(t.name.clone(), &t.render()).as_ref() != Ok(t) || t.render().as_bytes() != src.as_bytes()
        })
        .map(|(_, (name, _))| name)
        .collect();
    CheckLine {
        name: "template parse/render round trips".into(),
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("{} templates byte-exact", BUILTIN_SOURCES.len())
        } else {
            format!("mismatch for {bad:?}")
        },
    }
}

pub fn run_all(grad_seeds: u64) -> Vec<CheckLine> {
    let mut lines = gradient_suite(grad_seeds);
    lines.push(wer_oracle(1000, 7));
    lines.extend(beam_oracle(100));
    lines.push(template_round_trips());
    lines
}
