//! The full pipeline around one LM: speech projector, optional prompt
//! projector and LoRA adapter, plus the per-utterance loss.

use serde::{Deserialize, Serialize};

use crate::lm::{LmError, LmParams, LmVars, LoraAdapter, LoraVars};
use crate::params::ParamSet;
use crate::projector::{MlpProjector, ProjectorError, ProjectorVars};
use crate::prompt::{assemble, AssembledInput, AssemblyMode, Projection, PromptError, PromptTemplate, Tokenizer};
use crate::speech::{downsample, SpeechError, Utterance};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Speech(#[from] SpeechError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Training stages, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PretrainLm,
    TrainSp,
    TrainPp,
    LoraFt,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PretrainLm => "pretrain-lm",
            Self::TrainSp => "train-sp",
            Self::TrainPp => "train-pp",
            Self::LoraFt => "lora-ft",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Real = f32> {
    pub lm: LmParams<T>,
    pub sp: MlpProjector<T>,
    pub pp: Option<MlpProjector<T>>,
    pub lora: Option<LoraAdapter<T>>,
    /// Frames concatenated per speech-projector input row.
    pub downsample_k: usize,
    /// Whether `pp` also maps the `<s>` / `</s>` embeddings.
    pub pp_include_specials: bool,
    /// Stages completed so far, in order.
    pub stages: Vec<Stage>,
}

/// Tape handles for a bound bundle.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub lm: LmVars,
    pub sp: ProjectorVars,
    pub pp: Option<ProjectorVars>,
    pub lora: Option<LoraVars>,
}

/// Named parameter groups used for freezing checks and checksums.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Lm,
    Sp,
    Pp,
    Lora,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Lm, Group::Sp, Group::Pp, Group::Lora];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lm => "lm",
            Self::Sp => "sp",
            Self::Pp => "pp",
            Self::Lora => "lora",
        }
    }
}

impl<T: Real> ModelBundle<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            lm: self.lm.bind(tape),
            sp: self.sp.bind(tape),
            pp: self.pp.as_ref().map(|p| p.bind(tape)),
            lora: self.lora.as_ref().map(|l| l.bind(tape)),
        }
    }

    pub fn group(&self, g: Group) -> Option<&dyn ParamSet<T>> {
        match g {
            Group::Lm => Some(&self.lm),
            Group::Sp => Some(&self.sp),
            Group::Pp => self.pp.as_ref().map(|p| p as &dyn ParamSet<T>),
            Group::Lora => self.lora.as_ref().map(|p| p as &dyn ParamSet<T>),
        }
    }

    pub fn group_mut(&mut self, g: Group) -> Option<&mut dyn ParamSet<T>> {
        match g {
            Group::Lm => Some(&mut self.lm),
            Group::Sp => Some(&mut self.sp),
            Group::Pp => self.pp.as_mut().map(|p| p as &mut dyn ParamSet<T>),
            Group::Lora => self.lora.as_mut().map(|p| p as &mut dyn ParamSet<T>),
        }
    }

    /// Every tensor of every present group, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        Group::ALL
            .iter()
            .filter_map(|&g| self.group(g))
            .flat_map(|p| p.tensors())
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.lm.tensors_mut();
        out.extend(self.sp.tensors_mut());
        if let Some(pp) = &mut self.pp {
            out.extend(pp.tensors_mut());
        }
        if let Some(l) = &mut self.lora {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn pull_grads(&mut self, tape: &Tape<T>, bound: &BoundModel) {
        self.lm.pull_grads(tape, &bound.lm.all);
        self.sp.pull_grads(tape, &bound.sp.all);
        if let (Some(pp), Some(v)) = (&mut self.pp, &bound.pp) {
            pp.pull_grads(tape, &v.all);
        }
        if let (Some(l), Some(v)) = (&mut self.lora, &bound.lora) {
            l.pull_grads(tape, &v.all);
        }
    }

    /// Tensors that are frozen here but still received a gradient on `tape`.
    pub fn frozen_with_grad(&self, tape: &Tape<T>, bound: &BoundModel) -> Vec<String> {
        let mut pairs: Vec<(&dyn ParamSet<T>, &[Var])> = vec![(&self.lm, &bound.lm.all), (&self.sp, &bound.sp.all)];
        if let (Some(pp), Some(v)) = (&self.pp, &bound.pp) {
            pairs.push((pp, &v.all));
        }
        if let (Some(l), Some(v)) = (&self.lora, &bound.lora) {
            pairs.push((l, &v.all));
        }
        let mut out = Vec::new();
        for (set, vars) in pairs {
            for ((name, t), &v) in set.tensors().into_iter().zip(vars) {
                if !t.requires_grad() && tape.grad(v).is_some() {
                    out.push(name);
                }
            }
        }
        out
    }

    /// Projects downsampled speech features `[m×k·d_f]` with `sp`.
    pub fn speech_rows(&self, tape: &mut Tape<T>, bound: &BoundModel, features: &Tensor<T>) -> Result<Var> {
        let z = tape.constant(features.shape().to_vec(), features.data().to_vec())?;
        Ok(self.sp.project(tape, &bound.sp, z)?)
    }

    /// Downsamples an utterance's frames into `sp` inputs.
    pub fn features(&self, utt: &Utterance) -> Result<Tensor<T>> {
        Ok(downsample(&utt.frames, self.downsample_k)?.cast())
    }

    fn projection<'a>(&'a self, bound: &'a BoundModel, use_pp: bool) -> Option<Projection<'a, T>> {
        match (use_pp, &self.pp, &bound.pp) {
            (true, Some(projector), Some(vars)) => Some(Projection {
                projector,
                vars,
                include_specials: self.pp_include_specials,
            }),
            _ => None,
        }
    }

    fn lora_pair<'a>(&'a self, bound: &'a BoundModel) -> Option<(&'a LoraAdapter<T>, &'a LoraVars)> {
        match (&self.lora, &bound.lora) {
            (Some(l), Some(v)) => Some((l, v)),
            _ => None,
        }
    }

    /// Assembles one input sequence. `pp` and LoRA are used when present.
    pub fn assemble(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        template: &PromptTemplate,
        tokenizer: &Tokenizer,
        features: &Tensor<T>,
        transcript: Option<&str>,
        mode: AssemblyMode,
    ) -> Result<AssembledInput> {
        let speech = self.speech_rows(tape, bound, features)?;
        Ok(assemble(
            tape,
            template,
            tokenizer,
            &self.lm,
            &bound.lm,
            self.projection(bound, true),
            speech,
            transcript,
            mode,
        )?)
    }

    /// Mean next-token cross-entropy over the transcript and `</s>`.
    pub fn utterance_loss(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        template: &PromptTemplate,
        tokenizer: &Tokenizer,
        features: &Tensor<T>,
        transcript: &str,
    ) -> Result<Var> {
        let input = self.assemble(tape, bound, template, tokenizer, features, Some(transcript), AssemblyMode::Train)?;
        let logits = self.lm.forward_logits(tape, &bound.lm, self.lora_pair(bound), input.embeddings)?;
        Ok(tape.masked_cross_entropy(logits, &input.targets, &input.loss_mask)?)
    }

    /// Mean of per-utterance losses, i.e. what a padded batch with
    /// per-sequence averaging would compute.
    pub fn batch_loss(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        template: &PromptTemplate,
        tokenizer: &Tokenizer,
        batch: &[(&Tensor<T>, &str)],
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        let w = T::one() / T::of(batch.len() as f64);
        for (features, text) in batch {
            let l = self.utterance_loss(tape, bound, template, tokenizer, features, text)?;
            let l = tape.scale(l, w)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        total.ok_or_else(|| {
            TensorError::Invalid {
                op: "batch_loss",
                msg: "empty batch".into(),
            }
            .into()
        })
    }

    /// Row-major `[n×d]` LM input for decoding (prompt up to the point where
    /// generation starts).
    pub fn prompt_rows(&self, template: &PromptTemplate, tokenizer: &Tokenizer, features: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = self.assemble(&mut tape, &bound, template, tokenizer, features, None, AssemblyMode::Infer)?;
        Ok(tape.value(input.embeddings).to_vec())
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            lm: self.lm.cast(),
            sp: self.sp.cast(),
            pp: self.pp.as_ref().map(|p| p.cast()),
            lora: self.lora.as_ref().map(|l| l.cast()),
            downsample_k: self.downsample_k,
            pp_include_specials: self.pp_include_specials,
            stages: self.stages.clone(),
        }
    }
}
