//! Staged training: speech projector with everything else frozen, then the
//! prompt projector on top of the frozen result, then optional LoRA.

mod adamw;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adamw::{AdamW, AdamWConfig};

use crate::model::{Group, ModelBundle, ModelError, Stage};
use crate::prompt::{PromptTemplate, Tokenizer};
use crate::seed::derive_seed;
use crate::speech::{DatasetSplits, Utterance};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage {stage} needs {missing} first")]
    MissingPrerequisite { stage: &'static str, missing: &'static str },
    #[error("trainable tensor {0} has no gradient")]
    MissingGrad(String),
    #[error("non-finite gradient in {name} at index {index}: {value}")]
    NonFiniteGrad { name: String, index: usize, value: f64 },
    #[error("frozen tensors received gradients: {0:?}")]
    FrozenGradient(Vec<String>),
    #[error("frozen group {0} changed during the stage")]
    FreezeViolation(String),
    #[error("dataset split {0} is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Step size γ.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimizer steps between dev cross-entropy evaluations.
    pub eval_interval: usize,
    /// Consecutive non-improving evaluations before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Train-pp only: also train the LM and `sp`. Off by default because
    /// unfreezing the base is known to destabilize training.
    pub unfreeze_base: bool,
    /// LoRA stage only: keep `pp` trainable alongside the adapters.
    pub cotrain_pp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            max_epochs: 5,
            eval_interval: 200,
            early_stop_patience: 3,
            seed: 0,
            adamw: AdamWConfig::default(),
            unfreeze_base: false,
            cotrain_pp: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be >= 0");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be at least 1");
        }
        if self.eval_interval == 0 {
            return err("eval_interval must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return err("early_stop_patience must be at least 1");
        }
        Ok(())
    }
}

/// Tracks the best dev loss and how many evaluations since it improved.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    bad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            Verdict::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop { eval_index: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub epoch: usize,
    pub dev_ce: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub template: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub trainable: Vec<Group>,
    pub steps: usize,
    /// Mean training loss of each optimizer step.
    pub train_loss: Vec<f64>,
    /// Dev cross-entropy, starting with the evaluation before any update.
    pub dev_curve: Vec<EvalPoint>,
    pub best_dev_ce: f64,
    pub best_step: usize,
    pub stop_reason: StopReason,
    /// Checksums of groups that were frozen for the whole stage (verified
    /// unchanged).
    pub frozen_checksums: BTreeMap<String, String>,
}

/// Downsampled features paired with transcripts.
pub type Prepared = Vec<(Tensor<f32>, String)>;

pub fn prepare(bundle: &ModelBundle<f32>, utterances: &[Utterance]) -> Result<Prepared, TrainError> {
    utterances
        .iter()
        .map(|u| Ok((bundle.features(u)?, u.text.clone())))
        .collect()
}

/// Mean over utterances of the per-utterance masked cross-entropy.
pub fn dev_ce(
    bundle: &ModelBundle<f32>,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    dev: &Prepared,
) -> Result<f64, TrainError> {
    if dev.is_empty() {
        return Err(TrainError::EmptySplit("dev"));
    }
    let mut total = 0.0;
    for (features, text) in dev {
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape);
        let loss = bundle.utterance_loss(&mut tape, &bound, template, tokenizer, features, text)?;
        total += tape.value(loss)[0] as f64;
    }
    Ok(total / dev.len() as f64)
}

/// Dev cross-entropy with or without the bundle's prompt projector.
pub fn evaluate_dev_ce(
    bundle: &ModelBundle<f32>,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    dev: &[Utterance],
    pp_enabled: bool,
) -> Result<f64, TrainError> {
    let stripped;
    let bundle = if !pp_enabled && bundle.pp.is_some() {
        stripped = ModelBundle {
            pp: None,
            ..bundle.clone()
        };
        &stripped
    } else {
        bundle
    };
    dev_ce(bundle, template, tokenizer, &prepare(bundle, dev)?)
}

fn trainable_groups(stage: Stage, config: &TrainConfig) -> Vec<Group> {
    match stage {
        Stage::PretrainLm => vec![Group::Lm],
        Stage::TrainSp => vec![Group::Sp],
        Stage::TrainPp if config.unfreeze_base => vec![Group::Lm, Group::Sp, Group::Pp],
        Stage::TrainPp => vec![Group::Pp],
        Stage::LoraFt if config.cotrain_pp => vec![Group::Pp, Group::Lora],
        Stage::LoraFt => vec![Group::Lora],
    }
}

fn check_prerequisites(stage: Stage, bundle: &ModelBundle<f32>) -> Result<(), TrainError> {
    let name = stage.as_str();
    let need = |s: Stage, what: &'static str| {
        if bundle.stages.contains(&s) {
            Ok(())
        } else {
            Err(TrainError::MissingPrerequisite { stage: name, missing: what })
        }
    };
    match stage {
        Stage::PretrainLm => Err(TrainError::Config("use lm::pretrain for the LM stage".into())),
        Stage::TrainSp => need(Stage::PretrainLm, "a pretrained LM"),
        Stage::TrainPp => {
            need(Stage::TrainSp, "a vanilla (trained sp) checkpoint")?;
            if bundle.pp.is_none() {
                return Err(TrainError::MissingPrerequisite {
                    stage: name,
                    missing: "a prompt projector",
                });
            }
            Ok(())
        }
        Stage::LoraFt => {
            need(Stage::TrainSp, "a vanilla (trained sp) checkpoint")?;
            if bundle.lora.is_none() {
                return Err(TrainError::MissingPrerequisite {
                    stage: name,
                    missing: "a LoRA adapter",
                });
            }
            Ok(())
        }
    }
}

fn snapshot(bundle: &ModelBundle<f32>) -> Vec<Vec<f32>> {
    bundle
        .named_tensors()
        .into_iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(_, t)| t.data().to_vec())
        .collect()
}

fn restore(bundle: &mut ModelBundle<f32>, snap: &[Vec<f32>]) {
    let trainable = bundle.named_tensors_mut().into_iter().filter(|(_, t)| t.requires_grad());
    for ((_, t), data) in trainable.zip(snap) {
        t.data_mut().copy_from_slice(data);
    }
}

/// Runs one stage with a single fixed template. Only the stage's groups are
/// trainable; every other present group is frozen and verified unchanged
/// afterwards. The bundle ends up holding the best-dev checkpoint.
pub fn run_stage(
    stage: Stage,
    config: &TrainConfig,
    bundle: &mut ModelBundle<f32>,
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    splits: &DatasetSplits,
) -> Result<StageReport, TrainError> {
    config.validate()?;
    check_prerequisites(stage, bundle)?;
    if splits.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let trainable = trainable_groups(stage, config);
    for g in Group::ALL {
        if let Some(set) = bundle.group_mut(g) {
            set.set_all_trainable(trainable.contains(&g));
        }
    }
    let frozen_before: BTreeMap<String, String> = Group::ALL
        .iter()
        .filter(|g| !trainable.contains(g))
        .filter_map(|&g| bundle.group(g).map(|s| (g.as_str().to_string(), s.checksum())))
        .collect();

    let train = prepare(bundle, &splits.train)?;
    let dev = prepare(bundle, &splits.dev)?;
    let mut opt = AdamW::new(config.adamw.clone());
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut dev_curve = Vec::new();
    let mut train_loss = Vec::new();

    let initial = dev_ce(bundle, template, tokenizer, &dev)?;
    stopper.observe(initial);
    dev_curve.push(EvalPoint {
        step: 0,
        epoch: 0,
        dev_ce: initial,
    });
    let mut best = snapshot(bundle);
    let mut best_step = 0;
    let mut step = 0;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..config.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[stage.as_str(), "epoch", &epoch.to_string()],
        )));
        let batches: Vec<Vec<usize>> = order.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = bundle.bind(&mut tape);
            let items: Vec<(&Tensor<f32>, &str)> = batch.iter().map(|&i| (&train[i].0, train[i].1.as_str())).collect();
            let loss = bundle.batch_loss(&mut tape, &bound, template, tokenizer, &items)?;
            tape.backward(loss).map_err(ModelError::from)?;
            let leaked = bundle.frozen_with_grad(&tape, &bound);
            if !leaked.is_empty() {
                return Err(TrainError::FrozenGradient(leaked));
            }
            bundle.pull_grads(&tape, &bound);
            opt.step(bundle.named_tensors_mut(), config.learning_rate)?;
            train_loss.push(tape.value(loss)[0] as f64);
            step += 1;
            let last = epoch + 1 == config.max_epochs && bi + 1 == batches.len();
            if step % config.eval_interval == 0 || last {
                let ce = dev_ce(bundle, template, tokenizer, &dev)?;
                dev_curve.push(EvalPoint {
                    step,
                    epoch,
                    dev_ce: ce,
                });
                match stopper.observe(ce) {
                    Verdict::Improved => {
                        best = snapshot(bundle);
                        best_step = step;
                    }
                    Verdict::Continue => {}
                    Verdict::Stop => {
                        stop_reason = StopReason::EarlyStop {
                            eval_index: dev_curve.len() - 1,
                        };
                        break 'epochs;
                    }
                }
            }
        }
    }
    restore(bundle, &best);
    for (name, before) in &frozen_before {
        let g = Group::ALL.into_iter().find(|g| g.as_str() == name).expect("known group");
        let after = bundle.group(g).expect("group still present").checksum();
        if &after != before {
            return Err(TrainError::FreezeViolation(name.clone()));
        }
    }
    bundle.stages.push(stage);
    Ok(StageReport {
        stage,
        template: template.name.clone(),
        seed: config.seed,
        config: config.clone(),
        trainable,
        steps: step,
        train_loss,
        dev_curve,
        best_dev_ce: stopper.best(),
        best_step,
        stop_reason,
        frozen_checksums: frozen_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_counts_consecutive_misses() {
        let mut s = EarlyStopper::new(2);
        assert_eq!(s.observe(1.0), Verdict::Improved);
        assert_eq!(s.observe(1.1), Verdict::Continue);
        assert_eq!(s.observe(1.2), Verdict::Stop);
        let mut s = EarlyStopper::new(2);
        s.observe(1.0);
        s.observe(1.1);
        assert_eq!(s.observe(0.9), Verdict::Improved);
        assert_eq!(s.observe(0.95), Verdict::Continue);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: -1e-4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            early_stop_patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
