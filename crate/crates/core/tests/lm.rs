//! The toy LM against a loop-based reference forward pass, plus causality,
//! LoRA and KV-cache properties.

use promptproj::lm::{LmConfig, LmParams, LoraAdapter, LoraConfig};
use promptproj::params::ParamSet;
use promptproj::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(seed: u64) -> LmConfig {
    LmConfig {
        vocab_size: 11,
        model_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 12,
        max_sequence_length: 16,
        seed,
    }
}

/// Random values everywhere, including norms and biases, so that no
/// parameter sits at a trivial initial value.
fn scrambled(seed: u64) -> LmParams<f64> {
    let mut lm = LmParams::<f64>::init(&config(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for (_, t) in lm.tensors_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-0.6..0.6);
        }
    }
    lm
}

type M = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> M {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn attention(q: &M, k: &M, v: &M, heads: usize) -> M {
    let (n, d) = (q.len(), q[0].len());
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..=i).map(|j| w[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn lora_delta(x: &M, a: &Tensor<f64>, b: &Tensor<f64>, scale: f64) -> M {
    mul(&mul(x, &mat(a)), &mat(b))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v * scale).collect())
        .collect()
}

/// Pre-norm transformer written with nested loops.
fn reference_logits(lm: &LmParams<f64>, lora: Option<&LoraAdapter<f64>>, ids: &[usize]) -> M {
    let emb = mat(&lm.token_embedding);
    let pos = mat(&lm.position_embedding);
    let mut h: M = ids.iter().enumerate().map(|(i, &t)| emb[t].iter().zip(&pos[i]).map(|(a, b)| a + b).collect()).collect();
    for (li, l) in lm.layers.iter().enumerate() {
        let a = layer_norm(&h, l.ln1_gain.data(), l.ln1_bias.data());
        let mut q = mul(&a, &mat(&l.wq));
        let k = mul(&a, &mat(&l.wk));
        let mut v = mul(&a, &mat(&l.wv));
        if let Some(ad) = lora {
            let s = ad.config.scaling();
            q = add(&q, &lora_delta(&a, &ad.query[li].a, &ad.query[li].b, s));
            v = add(&v, &lora_delta(&a, &ad.value[li].a, &ad.value[li].b, s));
        }
        let att = attention(&q, &k, &v, lm.config.num_heads);
        h = add(&h, &mul(&att, &mat(&l.wo)));
        let b = layer_norm(&h, l.ln2_gain.data(), l.ln2_bias.data());
        let mut f = mul(&b, &mat(&l.ff_w1));
        for row in f.iter_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x + l.ff_b1.data()[j]).max(0.0);
            }
        }
        let mut f = mul(&f, &mat(&l.ff_w2));
        for row in f.iter_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x += l.ff_b2.data()[j];
            }
        }
        h = add(&h, &f);
    }
    let out = layer_norm(&h, lm.final_gain.data(), lm.final_bias.data());
    let emb_t: M = (0..emb[0].len()).map(|j| emb.iter().map(|r| r[j]).collect()).collect();
    mul(&out, &emb_t)
}

fn tape_logits(lm: &LmParams<f64>, lora: Option<&LoraAdapter<f64>>, ids: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = lm.bind(&mut tape);
    let lvars = lora.map(|l| l.bind(&mut tape));
    let x = lm.embed_tokens(&mut tape, &vars, ids).unwrap();
    let pair = lora.zip(lvars.as_ref());
    let logits = lm.forward_logits(&mut tape, &vars, pair, x).unwrap();
    tape.value(logits).to_vec()
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..11)).collect()
}

#[test]
fn forward_matches_loop_reference() {
    for seed in 0..5 {
        let lm = scrambled(seed);
        let ids = random_ids(&mut ChaCha8Rng::seed_from_u64(seed), 7);
        let expected: Vec<f64> = reference_logits(&lm, None, &ids).concat();
        let got = tape_logits(&lm, None, &ids);
        let err = expected.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "seed {seed}: max abs diff {err}");
    }
}

#[test]
fn lora_forward_matches_loop_reference() {
    let lm = scrambled(3);
    let mut lora = LoraAdapter::<f64>::init(&lm.config, &LoraConfig { rank: 2, alpha: 3.0 }, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (_, t) in lora.tensors_mut() {
        for x in t.data_mut() {
            *x = rng.random_range(-0.5..0.5);
        }
    }
    let ids = random_ids(&mut rng, 6);
    let expected: Vec<f64> = reference_logits(&lm, Some(&lora), &ids).concat();
    let got = tape_logits(&lm, Some(&lora), &ids);
    let err = expected.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "max abs diff {err}");
    assert_ne!(tape_logits(&lm, None, &ids), got, "trained adapter should change logits");
}

#[test]
fn lora_at_init_changes_no_logit() {
    let lm = LmParams::<f32>::init(&LmConfig::default()).unwrap();
    let lora = LoraAdapter::<f32>::init(&lm.config, &LoraConfig::default(), 4).unwrap();
    let ids: Vec<usize> = (0..20).map(|i| (i * 7) % 96).collect();
    let logits = |lora: Option<&LoraAdapter<f32>>| {
        let mut tape = Tape::new();
        let vars = lm.bind(&mut tape);
        let lvars = lora.map(|l| l.bind(&mut tape));
        let x = lm.embed_tokens(&mut tape, &vars, &ids).unwrap();
        let out = lm.forward_logits(&mut tape, &vars, lora.zip(lvars.as_ref()), x).unwrap();
        tape.value(out).to_vec()
    };
    let plain = logits(None);
    let with = logits(Some(&lora));
    assert!(plain.iter().zip(&with).all(|(a, b)| a.to_bits() == b.to_bits() || a == b));
}

#[test]
fn kv_cache_decoding_matches_full_forward() {
    let lm = scrambled(11);
    let ids = random_ids(&mut ChaCha8Rng::seed_from_u64(2), 9);
    let full = tape_logits(&lm, None, &ids);
    let mut cache = lm.new_cache();
    let v = lm.config.vocab_size;
    for (i, &id) in ids.iter().enumerate() {
        let row = lm.extend(None, &mut cache, lm.token_row(id)).unwrap();
        let expected = &full[i * v..(i + 1) * v];
        let err = row.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "position {i}: {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Changing the token at position j leaves every earlier logit row
    /// bit-identical.
    #[test]
    fn logits_are_causal(seed in 0u64..1000, len in 2usize..10, j_frac in 0.0f64..1.0, new in 0usize..11) {
        let lm = scrambled(seed % 7);
        let mut ids = random_ids(&mut ChaCha8Rng::seed_from_u64(seed), len);
        let j = ((len as f64 * j_frac) as usize).min(len - 1);
        let before = tape_logits(&lm, None, &ids);
        ids[j] = new;
        let after = tape_logits(&lm, None, &ids);
        let v = lm.config.vocab_size;
        prop_assert_eq!(&before[..j * v], &after[..j * v]);
    }
}
