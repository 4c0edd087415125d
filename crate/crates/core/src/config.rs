//! Experiment configuration (TOML), with every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::pretrain::PretrainConfig;
use crate::lm::{LmConfig, LoraConfig};
use crate::projector::InitScheme;
use crate::prompt::{resolve_template, PromptTemplate, BUILTIN_SOURCES};
use crate::speech::SynthConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

fn invalid(field: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Pp,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vanilla => "vanilla",
            Self::Pp => "pp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(Self::Vanilla),
            "pp" | "+pp" => Some(Self::Pp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Sentence file, one transcript per line; the bundled list when unset.
    pub corpus: Option<PathBuf>,
    /// Use only the first `max_utterances` lines.
    pub max_utterances: Option<usize>,
    /// Train, dev, test.
    pub proportions: [f64; 3],
    pub corpus_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            max_utterances: None,
            proportions: [0.8, 0.1, 0.1],
            corpus_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    /// Hidden width of both projectors.
    pub hidden_dim: usize,
    pub speech_init: InitScheme,
    pub prompt_init: InitScheme,
    /// Whether `pp` also maps `<s>` and `</s>`.
    pub project_specials: bool,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            speech_init: InitScheme::KaimingUniform,
            prompt_init: InitScheme::KaimingUniform,
            project_specials: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// Beam width; 4 as in the reference setup.
    pub beam_size: usize,
    /// Unset: twice the longest transcript (in tokens) in the dataset, plus
    /// one for `</s>`.
    pub max_new_tokens: Option<usize>,
    /// Also score every cell with greedy decoding.
    pub greedy: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_new_tokens: None,
            greedy: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seeds of the sweep; each one trains every cell anew.
    pub seeds: Vec<u64>,
    /// Built-in template names (`empty`, `base`, `1`..`8`) or inline
    /// templates containing `{speech}`.
    pub templates: Vec<String>,
    pub variants: Vec<Variant>,
    /// Which LoRA settings to run per variant (`false` = no adapter).
    pub lora: Vec<bool>,
    pub output_dir: PathBuf,
    /// Worker threads for the sweep.
    pub jobs: usize,
    /// Frames concatenated per speech-projector row (k = 5).
    pub downsample_k: usize,
    pub model: LmConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub projector: ProjectorConfig,
    pub pretrain: PretrainConfig,
    /// Defaults: lr 1e-4, batch 4, 5 epochs.
    pub train_sp: TrainConfig,
    pub train_pp: TrainConfig,
    pub lora_ft: TrainConfig,
    /// Rank 8, alpha 32.
    pub lora_adapter: LoraConfig,
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            templates: BUILTIN_SOURCES.iter().map(|(name, _)| name.to_string()).collect(),
            variants: vec![Variant::Vanilla, Variant::Pp],
            lora: vec![false],
            output_dir: PathBuf::from("runs"),
            jobs: 1,
            downsample_k: 5,
            model: LmConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            projector: ProjectorConfig::default(),
            pretrain: PretrainConfig::default(),
            train_sp: TrainConfig::default(),
            train_pp: TrainConfig::default(),
            lora_ft: TrainConfig::default(),
            lora_adapter: LoraConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Templates in configured order; inline ones are named `custom{i}`.
    pub fn resolved_templates(&self) -> Result<Vec<PromptTemplate>, ConfigError> {
        self.templates
            .iter()
            .enumerate()
            .map(|(i, t)| resolve_template(t, &format!("custom{i}")).map_err(|e| invalid(&format!("templates[{i}]"), e)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "need at least one seed"));
        }
        if self.templates.is_empty() {
            return Err(invalid("templates", "need at least one template"));
        }
        self.resolved_templates()?;
        if self.variants.is_empty() {
            return Err(invalid("variants", "need at least one variant"));
        }
        if self.lora.is_empty() {
            return Err(invalid("lora", "need at least one setting"));
        }
        if self.jobs == 0 {
            return Err(invalid("jobs", "must be at least 1"));
        }
        if self.downsample_k == 0 {
            return Err(invalid("downsample_k", "must be at least 1"));
        }
        self.model.validate().map_err(|e| invalid("model", e))?;
        self.synth.validate().map_err(|e| invalid("synth", e))?;
        let p = &self.data.proportions;
        if p.iter().any(|x| !(*x >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid("data.proportions", "must be non-negative and sum to 1"));
        }
        if self.data.max_utterances.is_some_and(|n| n < 10) {
            return Err(invalid("data.max_utterances", "must be at least 10"));
        }
        if self.projector.hidden_dim == 0 {
            return Err(invalid("projector.hidden_dim", "must be at least 1"));
        }
        if let InitScheme::NearIdentity { .. } = self.projector.speech_init {
            return Err(invalid("projector.speech_init", "near-identity applies to the prompt projector only"));
        }
        if let InitScheme::NearIdentity { noise } = self.projector.prompt_init {
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(invalid("projector.prompt_init.noise", "must be >= 0"));
            }
            if self.projector.hidden_dim < 2 * self.model.model_dim {
                return Err(invalid(
                    "projector.hidden_dim",
                    "near-identity needs hidden_dim >= 2 * model.model_dim",
                ));
            }
        }
        let pt = &self.pretrain;
        if !(pt.learning_rate >= 0.0 && pt.learning_rate.is_finite()) {
            return Err(invalid("pretrain.learning_rate", "must be >= 0"));
        }
        if pt.batch_size == 0 || pt.eval_interval == 0 {
            return Err(invalid("pretrain", "batch_size and eval_interval must be at least 1"));
        }
        if !(0.0..1.0).contains(&pt.dev_fraction) {
            return Err(invalid("pretrain.dev_fraction", "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&pt.min_lr_fraction) {
            return Err(invalid("pretrain.min_lr_fraction", "must be in [0, 1]"));
        }
        for (name, stage) in [("train_sp", &self.train_sp), ("train_pp", &self.train_pp), ("lora_ft", &self.lora_ft)] {
            stage.validate().map_err(|e| match e {
                crate::train::TrainError::Config(msg) => {
                    let field = msg.split_whitespace().next().unwrap_or("").to_string();
                    invalid(&format!("{name}.{field}"), msg)
                }
                other => invalid(name, other),
            })?;
        }
        if self.lora.contains(&true) && (self.lora_adapter.rank == 0 || !(self.lora_adapter.alpha > 0.0)) {
            return Err(invalid("lora_adapter", "rank must be >= 1 and alpha > 0"));
        }
        if self.decode.beam_size == 0 {
            return Err(invalid("decode.beam_size", "must be at least 1"));
        }
        if self.decode.max_new_tokens == Some(0) {
            return Err(invalid("decode.max_new_tokens", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.downsample_k, 5);
        assert_eq!(c.decode.beam_size, 4);
        assert_eq!(c.train_sp.learning_rate, 1e-4);
        assert_eq!(c.train_sp.batch_size, 4);
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::default();
        c.projector.prompt_init = InitScheme::NearIdentity { noise: 0.01 };
        c.templates.push("<s>USER: say {speech}\n ASSISTANT:".into());
        c.data.max_utterances = Some(500);
        c.lora = vec![false, true];
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn negative_rate_names_field() {
        let err = ExperimentConfig::from_toml("[train_pp]\nlearning_rate = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("train_pp.learning_rate"), "{err}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("beam = 3\n"), Err(ConfigError::Parse(_))));
    }
}
