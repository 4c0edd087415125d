//! Two-layer ReLU projector `e = ReLU(x·W1 + b1)·W2 + b2`, used both for
//! downsampled speech features and for prompt-token embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::{gemm, MatView, MatViewMut, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ProjectorError {
    #[error("projector extents must be at least 1 (in {input}, hidden {hidden}, out {output})")]
    Extent { input: usize, hidden: usize, output: usize },
    #[error("near-identity init needs in == out and hidden >= 2*in (in {input}, hidden {hidden}, out {output})")]
    NearIdentity { input: usize, hidden: usize, output: usize },
    #[error("near-identity init is only offered for the prompt projector")]
    NearIdentityRole,
    #[error("input width {got} does not match projector input {expected}")]
    Width { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorRole {
    Speech,
    Prompt,
}

impl ProjectorRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Speech => "speech",
            Self::Prompt => "prompt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum InitScheme {
    /// `W ~ U(±1/sqrt(fan_in))` for both layers, zero biases.
    KaimingUniform,
    /// `ReLU(x) − ReLU(−x) = x` construction plus `N(0, noise²)` on weights.
    NearIdentity { noise: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpProjector<T: Real = f32> {
    pub role: ProjectorRole,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ProjectorVars {
    pub all: Vec<Var>,
}

impl<T: Real> MlpProjector<T> {
    pub fn init(
        role: ProjectorRole,
        input: usize,
        hidden: usize,
        output: usize,
        seed: u64,
        scheme: InitScheme,
    ) -> Result<Self, ProjectorError> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(ProjectorError::Extent { input, hidden, output });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w1, w2) = match scheme {
            InitScheme::KaimingUniform => (
                Tensor::uniform(&[input, hidden], 1.0 / (input as f64).sqrt(), &mut rng),
                Tensor::uniform(&[hidden, output], 1.0 / (hidden as f64).sqrt(), &mut rng),
            ),
            InitScheme::NearIdentity { noise } => {
                if role != ProjectorRole::Prompt {
                    return Err(ProjectorError::NearIdentityRole);
                }
                if input != output || hidden < 2 * input {
                    return Err(ProjectorError::NearIdentity { input, hidden, output });
                }
                let mut w1 = Tensor::<T>::zeros(&[input, hidden]);
                let mut w2 = Tensor::<T>::zeros(&[hidden, output]);
                for i in 0..input {
                    w1.data_mut()[i * hidden + i] = T::one();
                    w1.data_mut()[i * hidden + input + i] = -T::one();
                    w2.data_mut()[i * output + i] = T::one();
                    w2.data_mut()[(input + i) * output + i] = -T::one();
                }
                if noise > 0.0 {
                    let n1 = Tensor::<T>::randn(&[input, hidden], noise, &mut rng);
                    let n2 = Tensor::<T>::randn(&[hidden, output], noise, &mut rng);
                    w1.data_mut().iter_mut().zip(n1.data()).for_each(|(a, &b)| *a += b);
                    w2.data_mut().iter_mut().zip(n2.data()).for_each(|(a, &b)| *a += b);
                }
                (w1, w2)
            }
        };
        let mut p = Self {
            role,
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[output]),
        };
        p.set_all_trainable(true);
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ProjectorVars {
        ProjectorVars {
            all: self.bind_all(tape),
        }
    }

    /// Applies the projector row-wise to `x: [n×in]` on the tape.
    pub fn project(&self, tape: &mut Tape<T>, vars: &ProjectorVars, x: Var) -> Result<Var, ProjectorError> {
        let got = tape.shape(x).last().copied().unwrap_or(0);
        if got != self.input_dim() {
            return Err(ProjectorError::Width {
                got,
                expected: self.input_dim(),
            });
        }
        let [w1, b1, w2, b2] = [vars.all[0], vars.all[1], vars.all[2], vars.all[3]];
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, w2)?;
        Ok(tape.add_bias(y, b2)?)
    }

    /// Same map on plain row-major data.
    pub fn project_rows(&self, x: &[T]) -> Result<Vec<T>, ProjectorError> {
        let (input, hidden, output) = (self.input_dim(), self.hidden_dim(), self.output_dim());
        if x.len() % input != 0 {
            return Err(ProjectorError::Width {
                got: x.len(),
                expected: input,
            });
        }
        let n = x.len() / input;
        let mut h = vec![T::zero(); n * hidden];
        gemm(
            T::one(),
            MatView::new(x, n, input),
            MatView::new(self.w1.data(), input, hidden),
            T::zero(),
            MatViewMut::new(&mut h, n, hidden),
        );
        for row in h.chunks_exact_mut(hidden) {
            for (v, &b) in row.iter_mut().zip(self.b1.data()) {
                *v = (*v + b).max(T::zero());
            }
        }
        let mut y = vec![T::zero(); n * output];
        gemm(
            T::one(),
            MatView::new(&h, n, hidden),
            MatView::new(self.w2.data(), hidden, output),
            T::zero(),
            MatViewMut::new(&mut y, n, output),
        );
        for row in y.chunks_exact_mut(output) {
            row.iter_mut().zip(self.b2.data()).for_each(|(v, &b)| *v = *v + b);
        }
        Ok(y)
    }

    pub fn cast<U: Real>(&self) -> MlpProjector<U> {
        MlpProjector {
            role: self.role,
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for MlpProjector<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let r = self.role.as_str();
        vec![
            (format!("{r}.w1"), &self.w1),
            (format!("{r}.b1"), &self.b1),
            (format!("{r}.w2"), &self.w2),
            (format!("{r}.b2"), &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let r = self.role.as_str();
        vec![
            (format!("{r}.w1"), &mut self.w1),
            (format!("{r}.b1"), &mut self.b1),
            (format!("{r}.w2"), &mut self.w2),
            (format!("{r}.b2"), &mut self.b2),
        ]
    }
}
