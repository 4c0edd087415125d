//! A small pre-LN decoder-only transformer that reads input *embeddings*
//! rather than token ids, so projected speech and prompt rows can be spliced
//! in directly.

mod infer;
mod lora;
pub mod pretrain;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

pub use infer::KvCache;
pub use lora::{LoraAdapter, LoraConfig, LoraVars};

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid LM config: {0}")]
    Config(String),
    #[error("sequence of {len} positions exceeds max_sequence_length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
    #[error("embedding width {got} does not match model_dim {expected}")]
    Width { got: usize, expected: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LmError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    /// Taken from the tokenizer (96 for the built-in character set).
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_sequence_length: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 96,
            model_dim: 64,
            num_layers: 4,
            num_heads: 4,
            ffn_dim: 256,
            max_sequence_length: 512,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_sequence_length", self.max_sequence_length),
        ] {
            if v == 0 {
                return Err(LmError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(LmError::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size, self.model_dim, self.ffn_dim, self.num_layers);
        let layer = 4 * d + 4 * d * d + d * f + f + f * d + d;
        v * d + self.max_sequence_length * d + l * layer + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Real> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub ff_w1: Tensor<T>,
    pub ff_b1: Tensor<T>,
    pub ff_w2: Tensor<T>,
    pub ff_b2: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    fn tensors(&self) -> [(&'static str, &Tensor<T>); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("ff_w1", &self.ff_w1),
            ("ff_b1", &self.ff_b1),
            ("ff_w2", &self.ff_w2),
            ("ff_b2", &self.ff_b2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 12] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("ff_w1", &mut self.ff_w1),
            ("ff_b1", &mut self.ff_b1),
            ("ff_w2", &mut self.ff_w2),
            ("ff_b2", &mut self.ff_b2),
        ]
    }
}

/// LM weights. The output projection is tied to `token_embedding`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams<T: Real = f32> {
    pub config: LmConfig,
    pub token_embedding: Tensor<T>,
    pub position_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
}

/// Tape handles for one bound copy of [`LmParams`].
#[derive(Clone, Debug)]
pub struct LmVars {
    pub all: Vec<Var>,
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<[Var; 12]>,
    final_gain: Var,
    final_bias: Var,
}

impl<T: Real> LmParams<T> {
    pub fn init(config: &LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.model_dim, config.ffn_dim);
        let resid = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let ones = |n: usize| Tensor::new(vec![n], vec![T::one(); n]).expect("size");
        let token_embedding = Tensor::randn(&[v, d], 0.1, &mut rng);
        let position_embedding = Tensor::randn(&[config.max_sequence_length, d], 0.02, &mut rng);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            let w = 1.0 / (d as f64).sqrt();
            layers.push(LayerParams {
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(&[d]),
                wq: Tensor::randn(&[d, d], w, &mut rng),
                wk: Tensor::randn(&[d, d], w, &mut rng),
                wv: Tensor::randn(&[d, d], w, &mut rng),
                wo: Tensor::randn(&[d, d], w * resid, &mut rng),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(&[d]),
                ff_w1: Tensor::randn(&[d, f], w, &mut rng),
                ff_b1: Tensor::zeros(&[f]),
                ff_w2: Tensor::randn(&[f, d], resid / (f as f64).sqrt(), &mut rng),
                ff_b2: Tensor::zeros(&[d]),
            });
        }
        let mut params = Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            layers,
            final_gain: ones(d),
            final_bias: Tensor::zeros(&[d]),
        };
        params.set_all_trainable(true);
        Ok(params)
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    /// Group names accepted by [`LmParams::set_frozen`].
    pub fn groups(&self) -> Vec<String> {
        let mut g = vec!["all".to_string(), "embeddings".to_string()];
        g.extend((0..self.layers.len()).map(|i| format!("layer.{i}")));
        g.push("final_norm".to_string());
        g
    }

    /// Sets `requires_grad` for every tensor in `group` to `!frozen`.
    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        let trainable = !frozen;
        match group {
            "all" => self.set_all_trainable(trainable),
            "embeddings" => {
                self.token_embedding.set_requires_grad(trainable);
                self.position_embedding.set_requires_grad(trainable);
            }
            "final_norm" => {
                self.final_gain.set_requires_grad(trainable);
                self.final_bias.set_requires_grad(trainable);
            }
            _ => {
                let layer = group
                    .strip_prefix("layer.")
                    .and_then(|i| i.parse::<usize>().ok())
                    .and_then(|i| self.layers.get_mut(i))
                    .ok_or_else(|| LmError::UnknownGroup(group.to_string()))?;
                for (_, t) in layer.tensors_mut() {
                    t.set_requires_grad(trainable);
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> LmVars {
        let all = self.bind_all(tape);
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("bound every tensor");
        let token_embedding = next();
        let position_embedding = next();
        let layers = (0..self.layers.len())
            .map(|_| std::array::from_fn(|_| next()))
            .collect();
        let final_gain = next();
        let final_bias = next();
        LmVars {
            all,
            token_embedding,
            position_embedding,
            layers,
            final_gain,
            final_bias,
        }
    }

    /// Raw token-embedding rows; positions are added inside the forward pass.
    pub fn embed_tokens(&self, tape: &mut Tape<T>, vars: &LmVars, ids: &[usize]) -> Result<Var> {
        Ok(tape.embedding(vars.token_embedding, ids)?)
    }

    /// Next-token logits `[n×V]` for input embeddings `x: [n×d]`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        vars: &LmVars,
        lora: Option<(&LoraAdapter<T>, &LoraVars)>,
        x: Var,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (n, width) = (shape[0], shape.get(1).copied().unwrap_or(0));
        if width != self.config.model_dim {
            return Err(LmError::Width {
                got: width,
                expected: self.config.model_dim,
            });
        }
        if n > self.config.max_sequence_length {
            return Err(LmError::SequenceTooLong {
                len: n,
                max: self.config.max_sequence_length,
            });
        }
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.embedding(vars.position_embedding, &positions)?;
        let mut h = tape.add(x, pos)?;
        for (i, lv) in vars.layers.iter().enumerate() {
            let [ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, ff_w1, ff_b1, ff_w2, ff_b2] = *lv;
            let a = tape.layer_norm(h, ln1_gain, ln1_bias)?;
            let mut q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let mut v = tape.matmul(a, wv)?;
            if let Some((adapter, lvars)) = lora {
                q = adapter.apply(tape, lvars, i, lora::Target::Query, a, q)?;
                v = adapter.apply(tape, lvars, i, lora::Target::Value, a, v)?;
            }
            let att = tape.causal_attention(q, k, v, self.config.num_heads)?;
            let o = tape.matmul(att, wo)?;
            h = tape.add(h, o)?;
            let b = tape.layer_norm(h, ln2_gain, ln2_bias)?;
            let f = tape.matmul(b, ff_w1)?;
            let f = tape.add_bias(f, ff_b1)?;
            let f = tape.relu(f)?;
            let f = tape.matmul(f, ff_w2)?;
            let f = tape.add_bias(f, ff_b2)?;
            h = tape.add(h, f)?;
        }
        let out = tape.layer_norm(h, vars.final_gain, vars.final_bias)?;
        Ok(tape.matmul_nt(out, vars.token_embedding)?)
    }

    /// Element-type conversion (used to rebuild a model in `f64` for
    /// gradient checks). Frozen flags are preserved.
    pub fn cast<U: Real>(&self) -> LmParams<U> {
        LmParams {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    ff_w1: l.ff_w1.cast(),
                    ff_b1: l.ff_b1.cast(),
                    ff_w2: l.ff_w2.cast(),
                    ff_b2: l.ff_b2.cast(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for LmParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.tensors().into_iter().map(|(n, t)| (format!("layer.{i}.{n}"), t)));
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.tensors_mut().into_iter().map(|(n, t)| (format!("layer.{i}.{n}"), t)));
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out
    }
}
