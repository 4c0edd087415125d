//! Decoding and scoring against brute-force oracles, and the statistics
//! against numerical integration and the published reference table.

mod common;

use std::collections::HashMap;

use common::{exhaustive_best, levenshtein, HashedModel, WORDS};
use promptproj::eval::beam::{beam_search, greedy, hypothesis_text, DecodeError, LmDecoder};
use promptproj::eval::reference::{round1, REFERENCE};
use promptproj::eval::stats::{paired_t_test, relative_delta, relative_reduction, summarize, t_two_tailed_p};
use promptproj::eval::wer::wer;
use promptproj::lm::{LmConfig, LmParams};
use promptproj::model::{ModelBundle, Stage};
use promptproj::projector::{InitScheme, MlpProjector, ProjectorRole};
use promptproj::prompt::{builtin_template, Tokenizer};
use promptproj::speech::{synthesize, SynthConfig};
use promptproj::tensor::Tape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn wer_matches_levenshtein_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let r: Vec<&str> = (0..rng.random_range(1..9)).map(|_| WORDS[rng.random_range(0..6)]).collect();
        let h: Vec<&str> = (0..rng.random_range(0..9)).map(|_| WORDS[rng.random_range(0..6)]).collect();
        let s = wer(&r.join(" "), &h.join(" ")).unwrap();
        assert_eq!(s.edits, levenshtein(&r, &h), "{r:?} / {h:?}");
        assert_eq!(s.ref_words, r.len());
    }
}

proptest! {
    #[test]
    fn wer_is_zero_on_identity_and_bounded(words in proptest::collection::vec(0usize..6, 1..10), other in proptest::collection::vec(0usize..6, 0..10)) {
        let r: Vec<&str> = words.iter().map(|&i| WORDS[i]).collect();
        let h: Vec<&str> = other.iter().map(|&i| WORDS[i]).collect();
        prop_assert_eq!(wer(&r.join(" "), &r.join("  ")).unwrap().edits, 0);
        let e = wer(&r.join(" "), &h.join(" ")).unwrap().edits;
        prop_assert!(e <= r.len().max(h.len()));
        prop_assert!(e >= r.len().abs_diff(h.len()));
    }
}

#[test]
fn beam4_matches_enumeration_on_vocab3_length4() {
    for prompt in 0..100 {
        let m = HashedModel { seed: prompt, vocab: 3 };
        let (tokens, score) = exhaustive_best(&m, 4);
        let h = beam_search(&m, 4, 4).unwrap();
        assert_eq!(h.tokens, tokens, "prompt {prompt}");
        assert!((h.log_prob - score).abs() < 1e-12);
    }
}

#[test]
fn wide_beam_is_exhaustive() {
    // 3^4 live paths at most: a beam that wide never prunes
    for prompt in 0..50 {
        let m = HashedModel { seed: 1000 + prompt, vocab: 4 };
        let (tokens, _) = exhaustive_best(&m, 4);
        assert_eq!(beam_search(&m, 81, 4).unwrap().tokens, tokens);
    }
}

#[test]
fn beam1_equals_greedy() {
    for prompt in 0..100 {
        let m = HashedModel { seed: 7 * prompt, vocab: 5 };
        assert_eq!(beam_search(&m, 1, 8).unwrap(), greedy(&m, 8).unwrap());
    }
}

#[test]
fn decoder_errors() {
    let m = HashedModel { seed: 0, vocab: 3 };
    assert!(matches!(beam_search(&m, 0, 4), Err(DecodeError::ZeroBeam)));
    assert!(matches!(greedy(&m, 0), Err(DecodeError::NoBudget)));
}

fn tiny_bundle() -> ModelBundle<f32> {
    let tok = Tokenizer::new();
    let lm = LmParams::init(&LmConfig {
        vocab_size: tok.vocab_size(),
        model_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        max_sequence_length: 256,
        seed: 4,
    })
    .unwrap();
    ModelBundle {
        lm,
        sp: MlpProjector::init(ProjectorRole::Speech, 32, 24, 16, 1, InitScheme::KaimingUniform).unwrap(),
        pp: Some(MlpProjector::init(ProjectorRole::Prompt, 16, 32, 16, 2, InitScheme::KaimingUniform).unwrap()),
        lora: None,
        downsample_k: 2,
        pp_include_specials: true,
        stages: vec![Stage::PretrainLm, Stage::TrainSp, Stage::TrainPp],
    }
}

/// Greedy decoding that re-runs the whole sequence through the tape at
/// every step, with no cache.
fn recompute_greedy(b: &ModelBundle<f32>, rows: &[f32], max: usize) -> Vec<usize> {
    let d = b.lm.model_dim();
    let mut seq = rows.to_vec();
    let mut out = Vec::new();
    for _ in 0..max {
        let mut tape = Tape::new();
        let vars = b.lm.bind(&mut tape);
        let x = tape.constant(vec![seq.len() / d, d], seq.clone()).unwrap();
        let logits = b.lm.forward_logits(&mut tape, &vars, None, x).unwrap();
        let v = b.lm.config.vocab_size;
        let last = &tape.value(logits)[tape.value(logits).len() - v..];
        let tok = (0..v).fold(0, |best, i| if last[i] > last[best] { i } else { best });
        out.push(tok);
        if tok == Tokenizer::EOS_ID {
            break;
        }
        seq.extend_from_slice(b.lm.token_row(tok));
    }
    out
}

#[test]
fn cached_decoder_matches_recomputation() {
    let b = tiny_bundle();
    let tok = Tokenizer::new();
    let utt = synthesize("u", "one two", 3, &SynthConfig::default()).unwrap();
    let features = b.features(&utt).unwrap();
    for name in ["empty", "base", "3"] {
        let t = builtin_template(name).unwrap();
        let dec = LmDecoder::new(&b, &t, &tok, &features).unwrap();
        let h = greedy(&dec, 12).unwrap();
        let rows = b.prompt_rows(&t, &tok, &features).unwrap();
        assert_eq!(h.tokens, recompute_greedy(&b, &rows, 12), "template {name}");
        let _ = hypothesis_text(&tok, &h);
    }
}

#[test]
fn identity_pp_decodes_like_vanilla() {
    let mut b = tiny_bundle();
    let tok = Tokenizer::new();
    let vanilla = ModelBundle { pp: None, ..b.clone() };
    b.pp = Some(MlpProjector::init(ProjectorRole::Prompt, 16, 32, 16, 9, InitScheme::NearIdentity { noise: 0.0 }).unwrap());
    for (i, text) in ["one two", "the cat sat", "go"].iter().enumerate() {
        let utt = synthesize("u", text, i as u64, &SynthConfig::default()).unwrap();
        let f = b.features(&utt).unwrap();
        for name in ["base", "1", "8"] {
            let t = builtin_template(name).unwrap();
            let a = beam_search(&LmDecoder::new(&b, &t, &tok, &f).unwrap(), 4, 10).unwrap();
            let v = beam_search(&LmDecoder::new(&vanilla, &t, &tok, &f).unwrap(), 4, 10).unwrap();
            assert_eq!(a.tokens, v.tokens);
            assert_eq!(a.log_prob.to_bits(), v.log_prob.to_bits());
        }
    }
}

/// Student-t density.
fn t_density(x: f64, df: f64) -> f64 {
    let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln();
    (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp()
}

/// Two-tailed p by composite Simpson on `x = |t| + u/(1-u)`, `u ∈ [0, 1)`.
fn p_by_integration(t: f64, df: f64) -> f64 {
    let n = 200_000;
    let h = 1.0 / n as f64;
    let f = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let x = t.abs() + u / (1.0 - u);
        t_density(x, df) / ((1.0 - u) * (1.0 - u))
    };
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * s * h / 3.0
}

#[test]
fn t_test_p_matches_numerical_integration() {
    for &(t, df) in &[(0.3, 8.0), (1.0, 3.0), (2.306, 8.0), (3.7, 8.0), (5.0, 44.0), (-2.5, 12.0)] {
        let want = p_by_integration(t, df);
        let got = t_two_tailed_p(t, df);
        assert!((got - want).abs() <= 1e-7 * want.max(1e-3), "t={t} df={df}: {got} vs {want}");
    }
}

#[test]
fn paired_t_test_by_hand() {
    let a = [10.0, 12.0, 9.0, 14.0, 11.0];
    let b = [9.0, 10.5, 9.5, 12.0, 10.0];
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / 5.0;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let t = mean / (sd / 5f64.sqrt());
    let r = paired_t_test(&a, &b).unwrap();
    assert!((r.t - t).abs() < 1e-12);
    assert_eq!(r.n, 5);
    assert!((r.p - p_by_integration(t, 4.0)).abs() < 1e-7);
    assert!(paired_t_test(&a, &a).is_err(), "zero variance has no t statistic");
    assert!(paired_t_test(&a[..1], &b[..1]).is_err());
}

#[test]
fn deltas_and_reductions() {
    assert_eq!(round1(relative_delta(3.09, 2.34).unwrap()), 24.3);
    assert_eq!(round1(relative_delta(5.85, 4.98).unwrap()), 14.9);
    assert!(relative_delta(2.0, 3.0).unwrap() < 0.0);
    assert!(relative_delta(0.0, 1.0).is_err());
    assert!((relative_reduction(10.0, 8.0).unwrap() - 20.0).abs() < 1e-12);
    let s = summarize(&[3.0, 1.0, 2.0, 10.0]).unwrap();
    assert_eq!((s.min, s.median, s.max, s.mean), (1.0, 2.5, 10.0, 4.0));
}

#[test]
fn reference_table_is_self_consistent() {
    let mut printed = HashMap::new();
    for col in REFERENCE.iter() {
        for check in col.delta_checks().unwrap() {
            printed.insert((col.dataset, check.prompt), check.consistent);
        }
        assert!(col.paired_test().unwrap().p < 0.05, "{}", col.dataset);
    }
    assert_eq!(printed.get(&("LS-C", "base")), Some(&true));
    assert_eq!(printed.get(&("LS-O", "base")), Some(&true));
}
