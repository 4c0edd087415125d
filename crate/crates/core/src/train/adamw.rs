use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay:
/// `θ ← θ − γ·(m̂/(√v̂ + ε) + λ·θ)`.
///
/// Moments are kept per parameter name and in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable tensor from its accumulated gradient and then
    /// clears the gradients. Frozen tensors are skipped. Nothing is modified
    /// if any trainable tensor lacks a gradient or has a non-finite one.
    pub fn step<T: Real>(&mut self, params: Vec<(String, &mut Tensor<T>)>, lr: f64) -> Result<(), TrainError> {
        for (name, t) in &params {
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().ok_or_else(|| TrainError::MissingGrad(name.clone()))?;
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGrad {
                    name: name.clone(),
                    index: i,
                    value: g[i].as_f64(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, tensor) in params {
            if !tensor.requires_grad() {
                continue;
            }
            let grad: Vec<f64> = tensor.grad().expect("checked above").iter().map(|g| g.as_f64()).collect();
            let mo = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for (i, x) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                mo.m[i] = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g;
                mo.v[i] = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = mo.m[i] / bc1;
                let v_hat = mo.v[i] / bc2;
                let theta = x.as_f64();
                *x = T::of(theta - lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * theta));
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64, g: Option<f64>, trainable: bool) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![x]).unwrap().with_requires_grad(trainable);
        if let Some(g) = g {
            t.accumulate_grad(&[g]);
        }
        t
    }

    #[test]
    fn first_step_closed_form() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut t = scalar(0.0, Some(1.0), true);
        opt.step(vec![("x".into(), &mut t)], 1e-4).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expected = -1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((t.data()[0] - expected).abs() < 1e-18);
        assert!(t.grad().is_none());
    }

    #[test]
    fn zero_grad_and_zero_lr_leave_params() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut t = scalar(0.7, Some(0.0), true);
        opt.step(vec![("x".into(), &mut t)], 1e-3).unwrap();
        assert_eq!(t.data()[0], 0.7);

        let mut opt = AdamW::new(AdamWConfig::default());
        let mut t = scalar(0.7, Some(5.0), true);
        opt.step(vec![("x".into(), &mut t)], 0.0).unwrap();
        assert_eq!(t.data()[0], 0.7);
    }

    #[test]
    fn frozen_untouched_and_nan_rejected() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut frozen = scalar(0.25, None, false);
        let mut live = scalar(1.0, Some(f64::NAN), true);
        let before = frozen.clone();
        let err = opt
            .step(vec![("f".into(), &mut frozen), ("l".into(), &mut live)], 1e-3)
            .unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGrad { .. }));
        assert_eq!(live.data()[0], 1.0);
        let mut live = scalar(1.0, Some(1.0), true);
        opt.step(vec![("f".into(), &mut frozen), ("l".into(), &mut live)], 1e-3).unwrap();
        assert!(frozen.bit_eq(&before));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut t = scalar(1.0, None, true);
        assert!(matches!(opt.step(vec![("x".into(), &mut t)], 1e-3), Err(TrainError::MissingGrad(_))));
    }
}
