//! Tape-free incremental forward pass with a key/value cache, used by the
//! decoders. It evaluates the same function as [`LmParams::forward_logits`].

use super::lora::Target;
use super::{LmError, LmParams, LoraAdapter, Result};
use crate::tensor::{gemm, MatView, MatViewMut, Real};

/// Per-layer keys and values of every position processed so far.
#[derive(Clone, Debug)]
pub struct KvCache<T: Real> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn layer_norm_rows<T: Real>(x: &[T], d: usize, gain: &[T], bias: &[T], out: &mut [T]) {
    let eps = T::of(1e-5);
    let dt = T::of(d as f64);
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().copied().sum::<T>() / dt;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        let rs = T::one() / (var + eps).sqrt();
        for j in 0..d {
            o[j] = (row[j] - mean) * rs * gain[j] + bias[j];
        }
    }
}

fn matmul_rows<T: Real>(x: &[T], n: usize, w: &[T], k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    gemm(
        T::one(),
        MatView::new(x, n, k),
        MatView::new(w, k, m),
        T::zero(),
        MatViewMut::new(&mut out, n, m),
    );
    out
}

impl<T: Real> LmParams<T> {
    pub fn new_cache(&self) -> KvCache<T> {
        KvCache {
            keys: vec![Vec::new(); self.layers.len()],
            values: vec![Vec::new(); self.layers.len()],
            len: 0,
        }
    }

    /// Row `id` of the token embedding table.
    pub fn token_row(&self, id: usize) -> &[T] {
        self.token_embedding.row(id)
    }

    /// Appends `n` input rows (`x` is `[n×d]` row-major) to the cache and
    /// returns the logits of the last appended position.
    pub fn extend(&self, lora: Option<&LoraAdapter<T>>, cache: &mut KvCache<T>, x: &[T]) -> Result<Vec<T>> {
        let d = self.config.model_dim;
        if x.is_empty() || x.len() % d != 0 {
            return Err(LmError::Width {
                got: x.len(),
                expected: d,
            });
        }
        let n = x.len() / d;
        let start = cache.len;
        let total = start + n;
        if total > self.config.max_sequence_length {
            return Err(LmError::SequenceTooLong {
                len: total,
                max: self.config.max_sequence_length,
            });
        }
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut h: Vec<T> = x.to_vec();
        for (i, row) in h.chunks_exact_mut(d).enumerate() {
            let p = self.position_embedding.row(start + i);
            row.iter_mut().zip(p).for_each(|(a, &b)| *a = *a + b);
        }
        let mut a = vec![T::zero(); n * d];
        for (li, layer) in self.layers.iter().enumerate() {
            layer_norm_rows(&h, d, layer.ln1_gain.data(), layer.ln1_bias.data(), &mut a);
            let mut q = matmul_rows(&a, n, layer.wq.data(), d, d);
            let k = matmul_rows(&a, n, layer.wk.data(), d, d);
            let mut v = matmul_rows(&a, n, layer.wv.data(), d, d);
            if let Some(adapter) = lora {
                adapter.apply_rows(li, Target::Query, &a, n, &mut q);
                adapter.apply_rows(li, Target::Value, &a, n, &mut v);
            }
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);
            let keys = &cache.keys[li];
            let values = &cache.values[li];
            let mut att = vec![T::zero(); n * d];
            let mut scores = vec![T::zero(); total];
            for i in 0..n {
                let pos = start + i;
                for hd in 0..heads {
                    let qi = &q[i * d + hd * dh..i * d + (hd + 1) * dh];
                    let s = &mut scores[..=pos];
                    for (j, sj) in s.iter_mut().enumerate() {
                        let kj = &keys[j * d + hd * dh..j * d + (hd + 1) * dh];
                        *sj = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    let max = s.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for sj in s.iter_mut() {
                        *sj = (*sj - max).exp();
                        z += *sj;
                    }
                    let out = &mut att[i * d + hd * dh..i * d + (hd + 1) * dh];
                    for (j, &sj) in s.iter().enumerate() {
                        let w = sj / z;
                        let vj = &values[j * d + hd * dh..j * d + (hd + 1) * dh];
                        out.iter_mut().zip(vj).for_each(|(o, &vv)| *o += w * vv);
                    }
                }
            }
            let o = matmul_rows(&att, n, layer.wo.data(), d, d);
            h.iter_mut().zip(&o).for_each(|(a, &b)| *a = *a + b);
            layer_norm_rows(&h, d, layer.ln2_gain.data(), layer.ln2_bias.data(), &mut a);
            let f = self.config.ffn_dim;
            let mut hidden = matmul_rows(&a, n, layer.ff_w1.data(), d, f);
            for row in hidden.chunks_exact_mut(f) {
                for (x, &b) in row.iter_mut().zip(layer.ff_b1.data()) {
                    *x = (*x + b).max(T::zero());
                }
            }
            let out = matmul_rows(&hidden, n, layer.ff_w2.data(), f, d);
            for (r, orow) in h.chunks_exact_mut(d).zip(out.chunks_exact(d)) {
                for ((x, &o), &b) in r.iter_mut().zip(orow).zip(layer.ff_b2.data()) {
                    *x = *x + (o + b);
                }
            }
        }
        cache.len = total;
        let last = &h[(n - 1) * d..];
        let mut normed = vec![T::zero(); d];
        layer_norm_rows(last, d, self.final_gain.data(), self.final_bias.data(), &mut normed);
        let vocab = self.config.vocab_size;
        let mut logits = vec![T::zero(); vocab];
        gemm(
            T::one(),
            MatView::new(&normed, 1, d),
            MatView::new(self.token_embedding.data(), vocab, d).t(),
            T::zero(),
            MatViewMut::new(&mut logits, 1, vocab),
        );
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(crate::tensor::TensorError::NonFinite { op: "lm_extend" }.into());
        }
        Ok(logits)
    }
}
