//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use promptproj::eval::beam::{DecodeError, StepModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Full-matrix Levenshtein distance.
pub fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub const WORDS: [&str; 6] = ["a", "b", "cat", "dog", "sun", "the"];

/// Log-probabilities drawn from a seeded hash of the whole prefix.
pub struct HashedModel {
    pub seed: u64,
    pub vocab: usize,
}

impl HashedModel {
    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in prefix {
            h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let z = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - z).collect()
    }
}

impl StepModel for HashedModel {
    type State = Vec<usize>;

    fn eos(&self) -> usize {
        0
    }

    fn start(&self) -> Result<(Vec<usize>, Vec<f64>), DecodeError> {
        Ok((Vec::new(), self.log_probs(&[])))
    }

    fn step(&self, state: &mut Vec<usize>, token: usize) -> Result<Vec<f64>, DecodeError> {
        state.push(token);
        Ok(self.log_probs(state))
    }
}

/// Every complete sequence (ended by `</s>`, or cut at `max_len`), best
/// first by score and then by token order.
pub fn exhaustive_best(m: &HashedModel, max_len: usize) -> (Vec<usize>, f64) {
    fn walk(m: &HashedModel, prefix: &mut Vec<usize>, score: f64, max_len: usize, out: &mut Vec<(Vec<usize>, f64)>) {
        let lp = m.log_probs(prefix);
        for (t, l) in lp.into_iter().enumerate() {
            prefix.push(t);
            if t == m.eos() || prefix.len() == max_len {
                out.push((prefix.clone(), score + l));
            } else {
                walk(m, prefix, score + l, max_len, out);
            }
            prefix.pop();
        }
    }
    let mut all = Vec::new();
    walk(m, &mut Vec::new(), 0.0, max_len, &mut all);
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.swap_remove(0)
}
