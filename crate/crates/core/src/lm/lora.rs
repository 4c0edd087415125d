use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LmConfig, LmError, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 32.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Target {
    Query,
    Value,
}

/// Low-rank update on one `[d_in×d_out]` weight used as `x·W`.
///
/// Stored in the same orientation as the weight, so the update is
/// `x·W + s·(x·A)·B` with `A: [d_in×r]`, `B: [r×d_out]` and
/// `s = alpha / rank`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T: Real> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

/// Adapters on the attention query and value projections of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T: Real = f32> {
    pub config: LoraConfig,
    pub query: Vec<LoraPair<T>>,
    pub value: Vec<LoraPair<T>>,
}

#[derive(Clone, Debug)]
pub struct LoraVars {
    pub all: Vec<Var>,
}

impl<T: Real> LoraAdapter<T> {
    /// `A` is uniform in `±1/sqrt(d_in)`, `B` is zero.
    pub fn init(lm: &LmConfig, config: &LoraConfig, seed: u64) -> Result<Self> {
        if config.rank == 0 || !(config.alpha.is_finite() && config.alpha > 0.0) {
            return Err(LmError::Config(format!(
                "LoRA needs rank >= 1 and alpha > 0, got rank {} alpha {}",
                config.rank, config.alpha
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = lm.model_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let pair = |rng: &mut ChaCha8Rng| LoraPair {
            a: Tensor::uniform(&[d, config.rank], bound, rng).with_requires_grad(true),
            b: Tensor::zeros(&[config.rank, d]).with_requires_grad(true),
        };
        let query = (0..lm.num_layers).map(|_| pair(&mut rng)).collect();
        let value = (0..lm.num_layers).map(|_| pair(&mut rng)).collect();
        Ok(Self {
            config: config.clone(),
            query,
            value,
        })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> LoraVars {
        LoraVars {
            all: self.bind_all(tape),
        }
    }

    fn vars(&self, vars: &LoraVars, layer: usize, target: Target) -> (Var, Var) {
        // layout: all query pairs, then all value pairs; (a, b) per pair
        let offset = match target {
            Target::Query => 0,
            Target::Value => 2 * self.query.len(),
        };
        (vars.all[offset + 2 * layer], vars.all[offset + 2 * layer + 1])
    }

    /// Returns `base + s·(x·A)·B` for the given layer and projection.
    pub(crate) fn apply(
        &self,
        tape: &mut Tape<T>,
        vars: &LoraVars,
        layer: usize,
        target: Target,
        x: Var,
        base: Var,
    ) -> Result<Var> {
        let (a, b) = self.vars(vars, layer, target);
        let low = tape.matmul(x, a)?;
        let up = tape.matmul(low, b)?;
        let up = tape.scale(up, T::of(self.config.scaling()))?;
        Ok(tape.add(base, up)?)
    }

    /// Same update on plain row-major data, for cached inference.
    pub(crate) fn apply_rows(&self, layer: usize, target: Target, x: &[T], n: usize, out: &mut [T]) {
        use crate::tensor::{gemm, MatView, MatViewMut};
        let pair = match target {
            Target::Query => &self.query[layer],
            Target::Value => &self.value[layer],
        };
        let (d_in, r) = (pair.a.rows(), pair.a.cols());
        let d_out = pair.b.cols();
        let mut low = vec![T::zero(); n * r];
        gemm(
            T::one(),
            MatView::new(x, n, d_in),
            MatView::new(pair.a.data(), d_in, r),
            T::zero(),
            MatViewMut::new(&mut low, n, r),
        );
        let mut up = vec![T::zero(); n * d_out];
        gemm(
            T::one(),
            MatView::new(&low, n, r),
            MatView::new(pair.b.data(), r, d_out),
            T::zero(),
            MatViewMut::new(&mut up, n, d_out),
        );
        let s = T::of(self.config.scaling());
        out.iter_mut().zip(&up).for_each(|(o, &u)| *o += u * s);
    }

    pub fn cast<U: Real>(&self) -> LoraAdapter<U> {
        let cast = |p: &LoraPair<T>| LoraPair {
            a: p.a.cast(),
            b: p.b.cast(),
        };
        LoraAdapter {
            config: self.config.clone(),
            query: self.query.iter().map(cast).collect(),
            value: self.value.iter().map(cast).collect(),
        }
    }
}

impl<T: Real> ParamSet<T> for LoraAdapter<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (kind, pairs) in [("query", &self.query), ("value", &self.value)] {
            for (i, p) in pairs.iter().enumerate() {
                out.push((format!("lora.{kind}.{i}.a"), &p.a));
                out.push((format!("lora.{kind}.{i}.b"), &p.b));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (kind, pairs) in [("query", &mut self.query), ("value", &mut self.value)] {
            for (i, p) in pairs.iter_mut().enumerate() {
                out.push((format!("lora.{kind}.{i}.a"), &mut p.a));
                out.push((format!("lora.{kind}.{i}.b"), &mut p.b));
            }
        }
        out
    }
}
